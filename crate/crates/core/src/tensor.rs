//! Dense row-major matrices and the primitives the consistency network is
//! built from. Every primitive has a forward pass and a hand-written
//! backward pass; there is no tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a vector has no usable direction.
pub const COSINE_EPS: f64 = 1e-12;
/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("cosine similarity: argument `{0}` has near-zero norm")]
    ZeroNorm(&'static str),
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// A single-row matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Stacks equal-length rows. An empty slice gives a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, r.len()),
                    right: (1, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_columns(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn accumulate(&mut self, grad: &Matrix) -> Result<(), TensorError> {
        self.grad.add_assign(grad)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x W + b`, with `b` a `1 x d_out` row broadcast over the rows of `x`.
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "linear bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads, TensorError> {
    Ok(LinearGrads {
        dx: dy.matmul_nt(w)?,
        dw: x.matmul_tn(dy)?,
        db: dy.column_sums(),
    })
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given the softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix, TensorError> {
    if y.shape() != dy.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_backward",
            left: y.shape(),
            right: dy.shape(),
        });
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner = dot(yr, dyr);
        for ((o, yv), dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - inner);
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

fn check_norms(a: &[f64], b: &[f64]) -> Result<(f64, f64), TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let na = norm(a);
    // NaN norms fail too
    if na.is_nan() || na <= COSINE_EPS {
        return Err(TensorError::ZeroNorm("a"));
    }
    let nb = norm(b);
    if nb.is_nan() || nb <= COSINE_EPS {
        return Err(TensorError::ZeroNorm("b"));
    }
    Ok((na, nb))
}

/// Cosine similarity clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    let (na, nb) = check_norms(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of the (unclamped) cosine with respect to `a` and `b`.
pub fn cosine_backward(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let (na, nb) = check_norms(a, b)?;
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - c * y / (nb * nb))
        .collect();
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// ReLU / dropout
// ---------------------------------------------------------------------------

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU, using the forward input `x` to pick the active set.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Per-element multipliers applied by a dropout pass: `0` or `1 / (1 - p)`.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    factors: Option<Vec<f64>>,
}

impl DropoutMask {
    pub fn kept_fraction(&self) -> f64 {
        match &self.factors {
            None => 1.0,
            Some(f) if f.is_empty() => 1.0,
            Some(f) => f.iter().filter(|v| **v != 0.0).count() as f64 / f.len() as f64,
        }
    }

    pub fn backward(&self, dy: &Matrix) -> Matrix {
        let mut dx = dy.clone();
        if let Some(f) = &self.factors {
            for (d, s) in dx.data_mut().iter_mut().zip(f) {
                *d *= s;
            }
        }
        dx
    }
}

/// Inverted dropout. Eval mode and `p = 0` return the input unchanged.
pub fn dropout(
    x: &Matrix,
    p: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Matrix, DropoutMask), TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidDropout(p));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), DropoutMask { factors: None }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - p);
    let factors: Vec<f64> = (0..x.data().len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
        .collect();
    let mut y = x.clone();
    for (v, s) in y.data_mut().iter_mut().zip(&factors) {
        *v *= s;
    }
    Ok((
        y,
        DropoutMask {
            factors: Some(factors),
        },
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

/// 1-D batch normalization over the rows of `x` (`n x k`).
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into `state` with momentum 0.1. Eval mode uses `state`.
pub fn batchnorm1d(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    state: &mut RunningStats,
    mode: Mode,
) -> Result<(Matrix, BatchNormCache), TensorError> {
    let (n, k) = x.shape();
    if gamma.shape() != (1, k) || beta.shape() != (1, k) {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm1d affine",
            left: x.shape(),
            right: gamma.shape(),
        });
    }
    if state.mean.len() != k || state.var.len() != k {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm1d running stats",
            left: x.shape(),
            right: (1, state.mean.len()),
        });
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(TensorError::BatchTooSmall(n));
            }
            let mut mean = vec![0.0; k];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; k];
            for r in 0..n {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let unbias = n as f64 / (n as f64 - 1.0);
            for j in 0..k {
                state.mean[j] =
                    (1.0 - BATCHNORM_MOMENTUM) * state.mean[j] + BATCHNORM_MOMENTUM * mean[j];
                state.var[j] = (1.0 - BATCHNORM_MOMENTUM) * state.var[j]
                    + BATCHNORM_MOMENTUM * var[j] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (state.mean.clone(), state.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    let mut x_hat = Matrix::zeros(n, k);
    let mut y = Matrix::zeros(n, k);
    for r in 0..n {
        for j in 0..k {
            let h = (x.get(r, j) - mean[j]) * inv_std[j];
            x_hat.set(r, j, h);
            y.set(r, j, gamma.get(0, j) * h + beta.get(0, j));
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub dx: Matrix,
    pub dgamma: Matrix,
    pub dbeta: Matrix,
}

pub fn batchnorm1d_backward(
    cache: &BatchNormCache,
    gamma: &Matrix,
    dy: &Matrix,
) -> Result<BatchNormGrads, TensorError> {
    let (n, k) = cache.x_hat.shape();
    if dy.shape() != (n, k) {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm1d_backward",
            left: (n, k),
            right: dy.shape(),
        });
    }
    let mut dgamma = Matrix::zeros(1, k);
    let dbeta = dy.column_sums();
    for r in 0..n {
        for j in 0..k {
            dgamma.data_mut()[j] += dy.get(r, j) * cache.x_hat.get(r, j);
        }
    }
    let mut dx = Matrix::zeros(n, k);
    match cache.mode {
        Mode::Eval => {
            for r in 0..n {
                for j in 0..k {
                    dx.set(r, j, dy.get(r, j) * gamma.get(0, j) * cache.inv_std[j]);
                }
            }
        }
        Mode::Train => {
            let nf = n as f64;
            for j in 0..k {
                let scale = gamma.get(0, j) * cache.inv_std[j] / nf;
                let sum_dy = dbeta.get(0, j);
                let sum_dy_xhat = dgamma.get(0, j);
                for r in 0..n {
                    let v = scale
                        * (nf * dy.get(r, j) - sum_dy - cache.x_hat.get(r, j) * sum_dy_xhat);
                    dx.set(r, j, v);
                }
            }
        }
    }
    Ok(BatchNormGrads { dx, dgamma, dbeta })
}

// ---------------------------------------------------------------------------
// Sigmoid / binary cross-entropy
// ---------------------------------------------------------------------------

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-[y ln x + (1 - y) ln(1 - x)]` with `x` clamped away from 0 and 1.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probs.len(), labels.len(), "bce_loss length mismatch");
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let x = x.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
        })
        .sum();
    total / probs.len() as f64
}

/// Gradient of [`bce_loss`] with respect to each probability. Entries that
/// were clamped receive zero gradient.
pub fn bce_backward(probs: &[f64], labels: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), labels.len(), "bce_backward length mismatch");
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&x) {
                0.0
            } else {
                (-(y / x) + (1.0 - y) / (1.0 - x)) / n
            }
        })
        .collect()
}
