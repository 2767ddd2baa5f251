//! Multi-head scaled dot-product attention with Q/K/V/O projections.
//!
//! A single attention layer: no residual connection, no layer norm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{linear, linear_backward, softmax_backward, softmax_rows, Matrix, ParamTensor, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("attention needs at least one key")]
    EmptyKeys,
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Projection weights (`d x d`) and biases (`1 x d`) of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    pub w_q: ParamTensor,
    pub b_q: ParamTensor,
    pub w_k: ParamTensor,
    pub b_k: ParamTensor,
    pub w_v: ParamTensor,
    pub b_v: ParamTensor,
    pub w_o: ParamTensor,
    pub b_o: ParamTensor,
}

impl AttentionBlockParams {
    /// Xavier-uniform weights and zero biases.
    pub fn init(prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        let mut w = |suffix: &str| {
            let data = (0..dim * dim).map(|_| rng.gen_range(-bound..bound)).collect();
            ParamTensor::new(
                format!("{prefix}.{suffix}"),
                Matrix::new(dim, dim, data).expect("square"),
            )
        };
        let (w_q, w_k, w_v, w_o) = (w("w_q"), w("w_k"), w("w_v"), w("w_o"));
        let b = |suffix: &str| ParamTensor::zeros(format!("{prefix}.{suffix}"), 1, dim);
        Self {
            w_q,
            b_q: b("b_q"),
            w_k,
            b_k: b("b_k"),
            w_v,
            b_v: b("b_v"),
            w_o,
            b_o: b("b_o"),
        }
    }

    /// Every projection is the identity and every bias zero.
    pub fn identity(prefix: &str, dim: usize) -> Self {
        let w = |s: &str| ParamTensor::new(format!("{prefix}.{s}"), Matrix::identity(dim));
        let b = |s: &str| ParamTensor::zeros(format!("{prefix}.{s}"), 1, dim);
        Self {
            w_q: w("w_q"),
            b_q: b("b_q"),
            w_k: w("w_k"),
            b_k: b("b_k"),
            w_v: w("w_v"),
            b_v: b("b_v"),
            w_o: w("w_o"),
            b_o: b("b_o"),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.value.rows()
    }

    pub fn tensors(&self) -> [&ParamTensor; 8] {
        [
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 8] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    /// `4 (d² + d)`
    pub fn parameter_count(dim: usize) -> usize {
        4 * (dim * dim + dim)
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    n_heads: usize,
    query: Matrix,
    keys: Matrix,
    values: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention matrices, `m x n` each.
    weights: Vec<Matrix>,
    concat: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `m x d`
    pub output: Matrix,
    /// Head-averaged attention, `m x n`.
    pub avg_weights: Matrix,
    pub cache: AttentionCache,
}

#[derive(Debug, Clone)]
pub struct AttentionInputGrads {
    pub d_query: Matrix,
    pub d_keys: Matrix,
    pub d_values: Matrix,
}

pub fn multi_head_attention(
    query: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    params: &AttentionBlockParams,
    n_heads: usize,
) -> Result<AttentionOutput, AttentionError> {
    let d = params.dim();
    if keys.rows() == 0 {
        return Err(AttentionError::EmptyKeys);
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(AttentionError::HeadsDoNotDivide { dim: d, heads: n_heads });
    }
    if keys.rows() != values.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "attention keys/values",
            left: keys.shape(),
            right: values.shape(),
        }
        .into());
    }
    let q = linear(query, &params.w_q.value, &params.b_q.value)?;
    let k = linear(keys, &params.w_k.value, &params.b_k.value)?;
    let v = linear(values, &params.w_v.value, &params.b_v.value)?;

    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (m, n) = (query.rows(), keys.rows());
    let mut concat = Matrix::zeros(m, d);
    let mut avg_weights = Matrix::zeros(m, n);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.columns(lo, hi);
        let kh = k.columns(lo, hi);
        let vh = v.columns(lo, hi);
        let mut scores = qh.matmul_nt(&kh)?;
        scores.scale(scale);
        let a = softmax_rows(&scores);
        concat.set_columns(lo, &a.matmul(&vh)?);
        avg_weights.add_assign(&a)?;
        weights.push(a);
    }
    avg_weights.scale(1.0 / n_heads as f64);
    let output = linear(&concat, &params.w_o.value, &params.b_o.value)?;
    Ok(AttentionOutput {
        output,
        avg_weights,
        cache: AttentionCache {
            n_heads,
            query: query.clone(),
            keys: keys.clone(),
            values: values.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    })
}

/// Back-propagates `d_output` (`m x d`), accumulating parameter gradients into
/// `params` and returning gradients for the three inputs.
pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    params: &mut AttentionBlockParams,
    d_output: &Matrix,
) -> Result<AttentionInputGrads, AttentionError> {
    let d = params.dim();
    let head_dim = d / cache.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let out_grads = linear_backward(&cache.concat, &params.w_o.value, d_output)?;
    params.w_o.accumulate(&out_grads.dw)?;
    params.b_o.accumulate(&out_grads.db)?;
    let d_concat = out_grads.dx;

    let (m, n) = (cache.q.rows(), cache.k.rows());
    let mut dq = Matrix::zeros(m, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..cache.n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = cache.q.columns(lo, hi);
        let kh = cache.k.columns(lo, hi);
        let vh = cache.v.columns(lo, hi);
        let a = &cache.weights[h];
        let d_head = d_concat.columns(lo, hi);
        let da = d_head.matmul_nt(&vh)?;
        dv.set_columns(lo, &a.matmul_tn(&d_head)?);
        let mut ds = softmax_backward(a, &da)?;
        ds.scale(scale);
        dq.set_columns(lo, &ds.matmul(&kh)?);
        dk.set_columns(lo, &ds.matmul_tn(&qh)?);
    }

    let gq = linear_backward(&cache.query, &params.w_q.value, &dq)?;
    params.w_q.accumulate(&gq.dw)?;
    params.b_q.accumulate(&gq.db)?;
    let gk = linear_backward(&cache.keys, &params.w_k.value, &dk)?;
    params.w_k.accumulate(&gk.dw)?;
    params.b_k.accumulate(&gk.db)?;
    let gv = linear_backward(&cache.values, &params.w_v.value, &dv)?;
    params.w_v.accumulate(&gv.dw)?;
    params.b_v.accumulate(&gv.db)?;
    Ok(AttentionInputGrads {
        d_query: gq.dx,
        d_keys: gk.dx,
        d_values: gv.dx,
    })
}
