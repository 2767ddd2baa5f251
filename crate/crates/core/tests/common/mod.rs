#![allow(dead_code)]

//! Test-only helpers: finite differences and naive reference implementations
//! that share no code with the library's kernels.

use ooc_core::data::{generate_synthetic, Sample, SynthSpec};
use ooc_core::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Initial steps tried by Ridders' extrapolation. Small steps rescue
/// strongly curved points and nearby kinks, large ones minimize rounding.
pub const FD_STEPS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
/// Error bound, relative to `max(|estimate|, 1)`, at which an estimate is
/// accepted without trying smaller steps.
pub const FD_ACCEPT: f64 = 1e-11;
/// Denominator floor for relative errors. The numerical derivative resolves
/// about 1e-13 absolute, so components below the floor are held to
/// `1e-7 * REL_FLOOR = 1e-12` absolute instead.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Derivative of `f` at `x` along coordinate `i` by Ridders' method:
/// central differences at geometrically shrinking steps, extrapolated to
/// zero step in a Neville tableau. Returns the estimate with the smallest
/// error bound, and that bound.
pub fn ridders(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h0: f64) -> (f64, f64) {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let orig = x[i];
    let mut central = |h: f64| {
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        (up - down) / (2.0 * h)
    };
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for col in 1..NTAB {
        h /= CON;
        a[0][col] = central(h);
        let mut fac = CON2;
        for row in 1..=col {
            a[row][col] = (a[row - 1][col] * fac - a[row - 1][col - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (a[row][col] - a[row - 1][col])
                .abs()
                .max((a[row][col] - a[row - 1][col - 1]).abs());
            if e <= err {
                err = e;
                best = a[row][col];
            }
        }
        if (a[col][col] - a[col - 1][col - 1]).abs() >= SAFE * err {
            break;
        }
    }
    (best, err)
}

/// Numerical gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            // first start step whose error bound is negligible, else the tightest
            let mut tightest = (0.0, f64::INFINITY);
            for &h in &FD_STEPS {
                let (est, err) = ridders(&mut f, &mut x, i, h);
                if err <= FD_ACCEPT * est.abs().max(1.0) {
                    return est;
                }
                if err < tightest.1 {
                    tightest = (est, err);
                }
            }
            tightest.0
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Naive references on nested Vecs
// ---------------------------------------------------------------------------

pub type Mat = Vec<Vec<f64>>;

pub fn naive_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + (0..row.len()).map(|k| row[k] * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

pub struct NaiveAttention {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

/// Loop-by-loop multi-head attention. Returns (output, head-averaged weights).
pub fn naive_attention(q_in: &Mat, k_in: &Mat, v_in: &Mat, p: &NaiveAttention, heads: usize) -> (Mat, Mat) {
    let d = p.wq.len();
    let hd = d / heads;
    let q = naive_linear(q_in, &p.wq, &p.bq);
    let k = naive_linear(k_in, &p.wk, &p.bk);
    let v = naive_linear(v_in, &p.wv, &p.bv);
    let m = q.len();
    let n = k.len();
    let mut concat = vec![vec![0.0; d]; m];
    let mut avg = vec![vec![0.0; n]; m];
    for h in 0..heads {
        for i in 0..m {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in h * hd..(h + 1) * hd {
                    s += q[i][c] * k[j][c];
                }
                scores[j] = s / (hd as f64).sqrt();
            }
            let a = naive_softmax(&scores);
            for j in 0..n {
                avg[i][j] += a[j] / heads as f64;
                for c in h * hd..(h + 1) * hd {
                    concat[i][c] += a[j] * v[j][c];
                }
            }
        }
    }
    (naive_linear(&concat, &p.wo, &p.bo), avg)
}

pub fn small_dataset(n: usize, d: usize, d_mm: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic(&SynthSpec {
        n_samples: n,
        d_v: d,
        d_t: d,
        d_mm,
        evidence_count_range: (1, 3),
        correlation: 0.6,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .1
}

/// Deterministic parameters from a closed-form pattern, independent of any RNG.
pub fn patterned_params(config: &ModelConfig) -> ModelParams {
    let mut params = ModelParams::init(config, 0).unwrap();
    for (t_idx, t) in params.tensors_mut().into_iter().enumerate() {
        let scale = if t.name.starts_with("head.bn.gamma") { 0.0 } else { 0.4 };
        let offset = if t.name.starts_with("head.bn.gamma") { 1.0 } else { 0.0 };
        for (i, v) in t.value.data_mut().iter_mut().enumerate() {
            *v = offset + scale * ((t_idx * 31 + i) as f64 * 0.7 + 0.3).sin();
        }
    }
    let k = config.score_len();
    params.head_stats.mean = (0..k).map(|j| 0.1 * j as f64 - 0.2).collect();
    params.head_stats.var = (0..k).map(|j| 0.5 + 0.25 * j as f64).collect();
    params
}
