//! The consistency network.
//!
//! Up to five blocks each reduce one comparison to a scalar:
//!
//! | block   | query            | evidence                       | score                         |
//! |---------|------------------|--------------------------------|-------------------------------|
//! | image   | query image      | retrieved images               | cos(query, attended evidence) |
//! | label   | query labels     | labels of retrieved images     | cos(query, attended evidence) |
//! | caption | query caption    | retrieved captions             | cos(query, attended evidence) |
//! | page    | source pages     | source pages (self-attention)  | row-wise mean cosine          |
//! | pair    | joint embedding  | none                           | two-layer MLP logit           |
//!
//! The scores are concatenated, batch-normalized and fed to a linear layer
//! followed by a sigmoid, giving the probability that the pair is falsified.
//! The label and page blocks can be switched off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    multi_head_attention, multi_head_attention_backward, AttentionBlockParams, AttentionCache,
    AttentionError,
};
use crate::data::Sample;
use crate::tensor::{
    batchnorm1d, batchnorm1d_backward, bce_backward, bce_loss, cosine_backward,
    cosine_similarity, dropout, linear, linear_backward, relu, relu_backward, sigmoid,
    BatchNormCache, DropoutMask, Matrix, Mode, ParamTensor, RunningStats, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample `{sample_id}`: `{field}` has length {actual}, model expects {expected}")]
    Dim {
        sample_id: String,
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("parameters do not match config: {0}")]
    ParamMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn default_heads() -> usize {
    8
}
fn default_hidden() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.2
}
fn default_threshold() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_mm: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_hidden")]
    pub hidden_mm: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_true")]
    pub use_label_block: bool,
    #[serde(default = "default_true")]
    pub use_page_block: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Score fed to the head when a block has no evidence to attend over.
    #[serde(default)]
    pub missing_evidence_score: f64,
}

impl ModelConfig {
    pub fn new(d_v: usize, d_t: usize, d_mm: usize) -> Self {
        Self {
            d_v,
            d_t,
            d_mm,
            n_heads: default_heads(),
            hidden_mm: default_hidden(),
            dropout_p: default_dropout(),
            use_label_block: true,
            use_page_block: true,
            threshold: default_threshold(),
            missing_evidence_score: 0.0,
        }
    }

    pub fn with_blocks(mut self, labels: bool, pages: bool) -> Self {
        self.use_label_block = labels;
        self.use_page_block = pages;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_v == 0 || self.d_t == 0 || self.d_mm == 0 || self.hidden_mm == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_v.is_multiple_of(self.n_heads) || !self.d_t.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads={} must divide d_v={} and d_t={}",
                self.n_heads, self.d_v, self.d_t
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p={} outside [0, 1)", self.dropout_p));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold={} outside (0, 1)", self.threshold));
        }
        if !(-1.0..=1.0).contains(&self.missing_evidence_score) {
            return bad("missing_evidence_score outside [-1, 1]".into());
        }
        Ok(())
    }

    /// Active blocks in score-vector order.
    pub fn active_blocks(&self) -> Vec<BlockKind> {
        let mut v = vec![BlockKind::Image];
        if self.use_label_block {
            v.push(BlockKind::Label);
        }
        v.push(BlockKind::Caption);
        if self.use_page_block {
            v.push(BlockKind::Page);
        }
        v.push(BlockKind::Pair);
        v
    }

    /// Length of the score vector.
    pub fn score_len(&self) -> usize {
        3 + usize::from(self.use_label_block) + usize::from(self.use_page_block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Image,
    Label,
    Caption,
    Page,
    Pair,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Image => "image",
            BlockKind::Label => "label",
            BlockKind::Caption => "caption",
            BlockKind::Page => "page",
            BlockKind::Pair => "pair",
        }
    }
}

/// Total trainable parameters for `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let text_blocks = 1 + usize::from(config.use_label_block) + usize::from(config.use_page_block);
    let total = AttentionBlockParams::parameter_count(config.d_v)
        + text_blocks * AttentionBlockParams::parameter_count(config.d_t);
    let k = config.score_len();
    let mlp = config.d_mm * config.hidden_mm + config.hidden_mm + config.hidden_mm + 1;
    let head = 2 * k + k + 1;
    total + mlp + head
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub image_block: AttentionBlockParams,
    pub label_block: Option<AttentionBlockParams>,
    pub caption_block: AttentionBlockParams,
    pub page_block: Option<AttentionBlockParams>,
    pub mm_inner_w: ParamTensor,
    pub mm_inner_b: ParamTensor,
    pub mm_outer_w: ParamTensor,
    pub mm_outer_b: ParamTensor,
    pub head_gamma: ParamTensor,
    pub head_beta: ParamTensor,
    pub head_w: ParamTensor,
    pub head_b: ParamTensor,
    /// Batch-norm running statistics (not trained by gradient).
    pub head_stats: RunningStats,
}

fn uniform(name: &str, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> ParamTensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    ParamTensor::new(name, Matrix::new(rows, cols, data).expect("shape"))
}

impl ModelParams {
    /// Random initialization: Xavier-uniform attention projections with zero
    /// biases, `U(±1/√fan_in)` for linear layers, unit batch-norm scale.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_block = AttentionBlockParams::init("image", config.d_v, &mut rng);
        let label_block = config
            .use_label_block
            .then(|| AttentionBlockParams::init("label", config.d_t, &mut rng));
        let caption_block = AttentionBlockParams::init("caption", config.d_t, &mut rng);
        let page_block = config
            .use_page_block
            .then(|| AttentionBlockParams::init("page", config.d_t, &mut rng));
        let b_in = 1.0 / (config.d_mm as f64).sqrt();
        let b_out = 1.0 / (config.hidden_mm as f64).sqrt();
        let k = config.score_len();
        let b_head = 1.0 / (k as f64).sqrt();
        Ok(Self {
            image_block,
            label_block,
            caption_block,
            page_block,
            mm_inner_w: uniform("pair.inner.w", config.d_mm, config.hidden_mm, b_in, &mut rng),
            mm_inner_b: uniform("pair.inner.b", 1, config.hidden_mm, b_in, &mut rng),
            mm_outer_w: uniform("pair.outer.w", config.hidden_mm, 1, b_out, &mut rng),
            mm_outer_b: uniform("pair.outer.b", 1, 1, b_out, &mut rng),
            head_gamma: ParamTensor::new("head.bn.gamma", Matrix::filled(1, k, 1.0)),
            head_beta: ParamTensor::zeros("head.bn.beta", 1, k),
            head_w: uniform("head.linear.w", k, 1, b_head, &mut rng),
            head_b: uniform("head.linear.b", 1, 1, b_head, &mut rng),
            head_stats: RunningStats::new(k),
        })
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = Vec::new();
        v.extend(self.image_block.tensors());
        if let Some(b) = &self.label_block {
            v.extend(b.tensors());
        }
        v.extend(self.caption_block.tensors());
        if let Some(b) = &self.page_block {
            v.extend(b.tensors());
        }
        v.extend([
            &self.mm_inner_w,
            &self.mm_inner_b,
            &self.mm_outer_w,
            &self.mm_outer_b,
            &self.head_gamma,
            &self.head_beta,
            &self.head_w,
            &self.head_b,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = Vec::new();
        v.extend(self.image_block.tensors_mut());
        if let Some(b) = &mut self.label_block {
            v.extend(b.tensors_mut());
        }
        v.extend(self.caption_block.tensors_mut());
        if let Some(b) = &mut self.page_block {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.mm_inner_w,
            &mut self.mm_inner_b,
            &mut self.mm_outer_w,
            &mut self.mm_outer_b,
            &mut self.head_gamma,
            &mut self.head_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_config(&self, config: &ModelConfig) -> Result<(), ModelError> {
        config.validate()?;
        let mismatch = |m: String| Err(ModelError::ParamMismatch(m));
        if self.label_block.is_some() != config.use_label_block
            || self.page_block.is_some() != config.use_page_block
        {
            return mismatch("optional blocks differ from config".into());
        }
        let blocks = [
            (Some(&self.image_block), config.d_v),
            (self.label_block.as_ref(), config.d_t),
            (Some(&self.caption_block), config.d_t),
            (self.page_block.as_ref(), config.d_t),
        ];
        for (b, d) in blocks.into_iter().filter_map(|(b, d)| b.map(|b| (b, d))) {
            for t in b.tensors() {
                let want = if t.name.contains(".w_") { (d, d) } else { (1, d) };
                if t.value.shape() != want {
                    return mismatch(format!("{} has shape {:?}, want {want:?}", t.name, t.value.shape()));
                }
            }
        }
        let k = config.score_len();
        let expected = [
            (&self.mm_inner_w, (config.d_mm, config.hidden_mm)),
            (&self.mm_inner_b, (1, config.hidden_mm)),
            (&self.mm_outer_w, (config.hidden_mm, 1)),
            (&self.mm_outer_b, (1, 1)),
            (&self.head_gamma, (1, k)),
            (&self.head_beta, (1, k)),
            (&self.head_w, (k, 1)),
            (&self.head_b, (1, 1)),
        ];
        for (t, want) in expected {
            if t.value.shape() != want {
                return mismatch(format!("{} has shape {:?}, want {want:?}", t.name, t.value.shape()));
            }
        }
        if self.head_stats.mean.len() != k || self.head_stats.var.len() != k {
            return mismatch("batch-norm running statistics length".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub s_images: Option<f64>,
    pub s_labels: Option<f64>,
    pub s_cpt: Option<f64>,
    pub s_pages: Option<f64>,
    pub s_logit: f64,
    /// The active scores in block order, absent ones replaced by the neutral value.
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Falsified,
    Pristine,
}

impl Verdict {
    pub fn from_probability(p_class: f64, threshold: f64) -> Self {
        if p_class >= threshold {
            Verdict::Falsified
        } else {
            Verdict::Pristine
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Falsified => "Falsified",
            Verdict::Pristine => "Pristine",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability that the pair is falsified.
    pub p_class: f64,
    pub verdict: Verdict,
    pub threshold_used: f64,
}

impl Prediction {
    pub fn new(p_class: f64, threshold: f64) -> Self {
        Self {
            p_class,
            verdict: Verdict::from_probability(p_class, threshold),
            threshold_used: threshold,
        }
    }
}

/// Attention of one block over its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAttention {
    pub block: BlockKind,
    /// Head-averaged weights, query rows by evidence columns.
    pub weights: Matrix,
    /// Evidence index with the highest attention (page index for the page block).
    pub argmax: usize,
    /// Source page of that evidence.
    pub page_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRanking {
    /// Blocks that had evidence, in order image, label, caption, page.
    pub blocks: Vec<BlockAttention>,
    /// Incoming attention per page from the page block; empty when inactive.
    pub page_importance: Vec<f64>,
    /// Top page of each block, first occurrence kept.
    pub attended_page_ids: Vec<String>,
}

impl AttentionRanking {
    pub fn block(&self, kind: BlockKind) -> Option<&BlockAttention> {
        self.blocks.iter().find(|b| b.block == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub prediction: Prediction,
    pub scores: ConsistencyScores,
    pub ranking: AttentionRanking,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Cross-attention consistency: `cos(query, MultiHead(query, evidence, evidence))`.
///
/// Returns `None` when `evidence` has no rows.
pub fn cross_consistency(
    query: &[f64],
    evidence: &Matrix,
    params: &AttentionBlockParams,
    n_heads: usize,
) -> Result<Option<(f64, Matrix)>, ModelError> {
    Ok(cross_block(query, evidence, params, n_heads)?.map(|c| (c.score, c.weights)))
}

/// Self-attention agreement among pages. Returns the mean row-wise cosine,
/// head-averaged weights (`p x p`) and per-page incoming attention.
pub fn page_consistency(
    pages: &Matrix,
    params: &AttentionBlockParams,
    n_heads: usize,
) -> Result<Option<(f64, Matrix, Vec<f64>)>, ModelError> {
    Ok(page_block(pages, params, n_heads)?.map(|c| {
        let importance = column_means(&c.weights);
        (c.score, c.weights, importance)
    }))
}

/// `Linear(ReLU(Dropout(Linear(pair))))` on a single embedding.
pub fn multimodal_consistency(
    pair: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<f64, ModelError> {
    if pair.len() != config.d_mm {
        return Err(ModelError::Dim {
            sample_id: String::new(),
            field: "pair_embedding".into(),
            expected: config.d_mm,
            actual: pair.len(),
        });
    }
    let x = Matrix::row_vector(pair.to_vec());
    Ok(pair_block(&x, params, config.dropout_p, mode, seed)?.logit)
}

struct BlockCache {
    query_rows: Matrix,
    attn: AttentionCache,
    output: Matrix,
    score: f64,
    weights: Matrix,
}

fn cross_block(
    query: &[f64],
    evidence: &Matrix,
    params: &AttentionBlockParams,
    n_heads: usize,
) -> Result<Option<BlockCache>, ModelError> {
    if evidence.rows() == 0 {
        return Ok(None);
    }
    let q = Matrix::row_vector(query.to_vec());
    let att = multi_head_attention(&q, evidence, evidence, params, n_heads)?;
    let score = cosine_similarity(query, att.output.row(0))?;
    Ok(Some(BlockCache {
        query_rows: q,
        attn: att.cache,
        output: att.output,
        score,
        weights: att.avg_weights,
    }))
}

fn page_block(
    pages: &Matrix,
    params: &AttentionBlockParams,
    n_heads: usize,
) -> Result<Option<BlockCache>, ModelError> {
    if pages.rows() == 0 {
        return Ok(None);
    }
    let att = multi_head_attention(pages, pages, pages, params, n_heads)?;
    let mut total = 0.0;
    for l in 0..pages.rows() {
        total += cosine_similarity(pages.row(l), att.output.row(l))?;
    }
    let score = (total / pages.rows() as f64).clamp(-1.0, 1.0);
    Ok(Some(BlockCache {
        query_rows: pages.clone(),
        attn: att.cache,
        output: att.output,
        score,
        weights: att.avg_weights,
    }))
}

/// Gradient of the block score with respect to the attention output.
fn block_output_grad(cache: &BlockCache, d_score: f64) -> Result<Matrix, ModelError> {
    let m = cache.query_rows.rows();
    let mut d_out = Matrix::zeros(m, cache.output.cols());
    let per_row = d_score / m as f64;
    for l in 0..m {
        let (_, d_b) = cosine_backward(cache.query_rows.row(l), cache.output.row(l))?;
        for (o, g) in d_out.row_mut(l).iter_mut().zip(d_b) {
            *o = per_row * g;
        }
    }
    Ok(d_out)
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let sums = m.column_sums();
    sums.data().iter().map(|s| s / m.rows() as f64).collect()
}

struct PairCache {
    x: Matrix,
    dropped: Matrix,
    mask: DropoutMask,
    activated: Matrix,
    logit: f64,
}

fn pair_block(
    x: &Matrix,
    params: &ModelParams,
    p: f64,
    mode: Mode,
    seed: u64,
) -> Result<PairCache, ModelError> {
    let inner = linear(x, &params.mm_inner_w.value, &params.mm_inner_b.value)?;
    let (dropped, mask) = dropout(&inner, p, mode, seed)?;
    let activated = relu(&dropped);
    let out = linear(&activated, &params.mm_outer_w.value, &params.mm_outer_b.value)?;
    Ok(PairCache {
        x: x.clone(),
        dropped,
        mask,
        activated,
        logit: out.get(0, 0),
    })
}

fn pair_backward(cache: &PairCache, params: &mut ModelParams, d_logit: f64) -> Result<(), ModelError> {
    let dy = Matrix::filled(1, 1, d_logit);
    let g_out = linear_backward(&cache.activated, &params.mm_outer_w.value, &dy)?;
    params.mm_outer_w.accumulate(&g_out.dw)?;
    params.mm_outer_b.accumulate(&g_out.db)?;
    let d_dropped = relu_backward(&cache.dropped, &g_out.dx);
    let d_inner = cache.mask.backward(&d_dropped);
    let g_in = linear_backward(&cache.x, &params.mm_inner_w.value, &d_inner)?;
    params.mm_inner_w.accumulate(&g_in.dw)?;
    params.mm_inner_b.accumulate(&g_in.db)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-sample scoring
// ---------------------------------------------------------------------------

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn stack<'a>(rows: impl Iterator<Item = &'a Vec<f32>>, dim: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = rows.map(|r| to_f64(r)).collect();
    Matrix::from_rows(&rows, dim).expect("validated dims")
}

fn check_sample_dims(sample: &Sample, config: &ModelConfig) -> Result<(), ModelError> {
    let dim_err = |field: String, expected: usize, actual: usize| ModelError::Dim {
        sample_id: sample.sample_id.clone(),
        field,
        expected,
        actual,
    };
    let mut checks: Vec<(String, usize, usize)> = vec![
        ("image_embedding".into(), config.d_v, sample.image_embedding.len()),
        ("caption_embedding".into(), config.d_t, sample.caption_embedding.len()),
        ("labels_embedding".into(), config.d_t, sample.labels_embedding.len()),
        ("pair_embedding".into(), config.d_mm, sample.pair_embedding.len()),
    ];
    for (i, e) in sample.visual_evidence.iter().enumerate() {
        checks.push((format!("visual_evidence[{i}].embedding"), config.d_v, e.embedding.len()));
        checks.push((
            format!("visual_evidence[{i}].labels_embedding"),
            config.d_t,
            e.labels_embedding.len(),
        ));
    }
    for (i, e) in sample.textual_evidence.iter().enumerate() {
        checks.push((format!("textual_evidence[{i}].embedding"), config.d_t, e.embedding.len()));
    }
    for (i, p) in sample.pages.iter().enumerate() {
        checks.push((format!("pages[{i}].embedding"), config.d_t, p.embedding.len()));
    }
    for (field, expected, actual) in checks {
        if expected != actual {
            return Err(dim_err(field, expected, actual));
        }
    }
    Ok(())
}

struct SampleCache {
    /// (score-vector column, block, cache) for every block that produced a score.
    blocks: Vec<(usize, BlockKind, BlockCache)>,
    pair: PairCache,
    pair_col: usize,
}

fn dropout_seed(batch_seed: u64, index: usize) -> u64 {
    batch_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn score_sample(
    sample: &Sample,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<(ConsistencyScores, AttentionRanking, SampleCache), ModelError> {
    check_sample_dims(sample, config)?;
    let heads = config.n_heads;
    let neutral = config.missing_evidence_score;
    let mut vector = Vec::with_capacity(config.score_len());
    let mut blocks = Vec::new();
    let mut ranking_blocks = Vec::new();

    let visual = stack(sample.visual_evidence.iter().map(|e| &e.embedding), config.d_v);
    let visual_labels = stack(
        sample.visual_evidence.iter().map(|e| &e.labels_embedding),
        config.d_t,
    );
    let textual = stack(sample.textual_evidence.iter().map(|e| &e.embedding), config.d_t);
    let pages = stack(sample.pages.iter().map(|p| &p.embedding), config.d_t);

    let mut page_importance = Vec::new();
    let mut scores = ConsistencyScores {
        s_images: None,
        s_labels: None,
        s_cpt: None,
        s_pages: None,
        s_logit: 0.0,
        vector: Vec::new(),
    };

    for kind in config.active_blocks() {
        let col = vector.len();
        let cache = match kind {
            BlockKind::Image => cross_block(
                &to_f64(&sample.image_embedding),
                &visual,
                &params.image_block,
                heads,
            )?,
            BlockKind::Label => cross_block(
                &to_f64(&sample.labels_embedding),
                &visual_labels,
                params.label_block.as_ref().ok_or_else(|| {
                    ModelError::ParamMismatch("label block enabled but missing".into())
                })?,
                heads,
            )?,
            BlockKind::Caption => cross_block(
                &to_f64(&sample.caption_embedding),
                &textual,
                &params.caption_block,
                heads,
            )?,
            BlockKind::Page => page_block(
                &pages,
                params.page_block.as_ref().ok_or_else(|| {
                    ModelError::ParamMismatch("page block enabled but missing".into())
                })?,
                heads,
            )?,
            BlockKind::Pair => break,
        };
        let value = cache.as_ref().map(|c| c.score);
        match kind {
            BlockKind::Image => scores.s_images = value,
            BlockKind::Label => scores.s_labels = value,
            BlockKind::Caption => scores.s_cpt = value,
            BlockKind::Page => scores.s_pages = value,
            BlockKind::Pair => unreachable!(),
        }
        vector.push(value.unwrap_or(neutral));
        if let Some(cache) = cache {
            let (argmax_idx, page_id) = match kind {
                BlockKind::Page => {
                    page_importance = column_means(&cache.weights);
                    let i = argmax(&page_importance).expect("non-empty");
                    (i, sample.pages[i].page_id.clone())
                }
                _ => {
                    let i = argmax(cache.weights.row(0)).expect("non-empty");
                    let page_id = match kind {
                        BlockKind::Caption => sample.textual_evidence[i].page_id.clone(),
                        _ => sample.visual_evidence[i].page_id.clone(),
                    };
                    (i, page_id)
                }
            };
            ranking_blocks.push(BlockAttention {
                block: kind,
                weights: cache.weights.clone(),
                argmax: argmax_idx,
                page_id,
            });
            blocks.push((col, kind, cache));
        }
    }

    let pair_x = Matrix::row_vector(to_f64(&sample.pair_embedding));
    let pair = pair_block(&pair_x, params, config.dropout_p, mode, seed)?;
    scores.s_logit = pair.logit;
    let pair_col = vector.len();
    vector.push(pair.logit);
    scores.vector = vector;

    let mut attended_page_ids: Vec<String> = Vec::new();
    for b in &ranking_blocks {
        if !attended_page_ids.contains(&b.page_id) {
            attended_page_ids.push(b.page_id.clone());
        }
    }
    let ranking = AttentionRanking {
        blocks: ranking_blocks,
        page_importance,
        attended_page_ids,
    };
    Ok((
        scores,
        ranking,
        SampleCache {
            blocks,
            pair,
            pair_col,
        },
    ))
}

// ---------------------------------------------------------------------------
// Batch forward / backward
// ---------------------------------------------------------------------------

struct HeadCache {
    bn: BatchNormCache,
    normalized: Matrix,
}

struct BatchPass {
    outputs: Vec<ForwardOutput>,
    probs: Vec<f64>,
    samples: Vec<SampleCache>,
    head: HeadCache,
}

fn run_batch(
    samples: &[&Sample],
    params: &ModelParams,
    stats: &mut RunningStats,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<BatchPass, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let k = config.score_len();
    let mut caches = Vec::with_capacity(samples.len());
    let mut partial = Vec::with_capacity(samples.len());
    let mut features = Matrix::zeros(samples.len(), k);
    for (i, s) in samples.iter().enumerate() {
        let (scores, ranking, cache) = score_sample(s, params, config, mode, dropout_seed(seed, i))?;
        features.row_mut(i).copy_from_slice(&scores.vector);
        partial.push((scores, ranking));
        caches.push(cache);
    }
    let (normalized, bn) = batchnorm1d(
        &features,
        &params.head_gamma.value,
        &params.head_beta.value,
        stats,
        mode,
    )?;
    let logits = linear(&normalized, &params.head_w.value, &params.head_b.value)?;
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let outputs = partial
        .into_iter()
        .zip(&probs)
        .map(|((scores, ranking), &p)| ForwardOutput {
            prediction: Prediction::new(p, config.threshold),
            scores,
            ranking,
        })
        .collect();
    Ok(BatchPass {
        outputs,
        probs,
        samples: caches,
        head: HeadCache { bn, normalized },
    })
}

fn backward_batch(
    pass: &BatchPass,
    params: &mut ModelParams,
    d_probs: &[f64],
) -> Result<(), ModelError> {
    let n = d_probs.len();
    let d_logits: Vec<f64> = d_probs
        .iter()
        .zip(&pass.probs)
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    let d_logits = Matrix::new(n, 1, d_logits)?;
    let g_head = linear_backward(&pass.head.normalized, &params.head_w.value, &d_logits)?;
    params.head_w.accumulate(&g_head.dw)?;
    params.head_b.accumulate(&g_head.db)?;
    let g_bn = batchnorm1d_backward(&pass.head.bn, &params.head_gamma.value, &g_head.dx)?;
    params.head_gamma.accumulate(&g_bn.dgamma)?;
    params.head_beta.accumulate(&g_bn.dbeta)?;
    let d_features = g_bn.dx;

    for (i, cache) in pass.samples.iter().enumerate() {
        let row = d_features.row(i);
        for (col, kind, block) in &cache.blocks {
            let d_out = block_output_grad(block, row[*col])?;
            let target = match kind {
                BlockKind::Image => &mut params.image_block,
                BlockKind::Label => params.label_block.as_mut().expect("label block"),
                BlockKind::Caption => &mut params.caption_block,
                BlockKind::Page => params.page_block.as_mut().expect("page block"),
                BlockKind::Pair => unreachable!(),
            };
            multi_head_attention_backward(&block.attn, target, &d_out)?;
        }
        pair_backward(&cache.pair, params, row[cache.pair_col])?;
    }
    Ok(())
}

/// Runs one sample through the network.
///
/// Train mode needs batch statistics and therefore fails here with a
/// batch-size error; use [`forward_batch`] for training-mode passes.
pub fn forward(
    sample: &Sample,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput, ModelError> {
    let mut stats = params.head_stats.clone();
    let mut pass = run_batch(&[sample], params, &mut stats, config, mode, 0)?;
    Ok(pass.outputs.remove(0))
}

/// Eval-mode forward over many samples; results are in input order.
pub fn predict_all(
    samples: &[Sample],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<ForwardOutput>, ModelError> {
    samples
        .iter()
        .map(|s| forward(s, params, config, Mode::Eval))
        .collect()
}

/// Forward pass over a batch. In train mode the batch-norm running
/// statistics in `params` are updated.
pub fn forward_batch(
    samples: &[&Sample],
    params: &mut ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<Vec<ForwardOutput>, ModelError> {
    let mut stats = params.head_stats.clone();
    let pass = run_batch(samples, params, &mut stats, config, mode, seed)?;
    params.head_stats = stats;
    Ok(pass.outputs)
}

fn labels_of(samples: &[&Sample]) -> Vec<f64> {
    samples.iter().map(|s| f64::from(s.label)).collect()
}

/// Mean binary cross-entropy of a batch without touching gradients or
/// running statistics.
pub fn batch_loss(
    samples: &[&Sample],
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<f64, ModelError> {
    let mut stats = params.head_stats.clone();
    let pass = run_batch(samples, params, &mut stats, config, mode, seed)?;
    Ok(bce_loss(&pass.probs, &labels_of(samples)))
}

/// Forward + backward over a batch. Gradients are added to the existing
/// `grad` buffers (call [`ModelParams::zero_grad`] first); train mode also
/// updates batch-norm running statistics. Returns the loss and outputs.
pub fn loss_and_backward(
    samples: &[&Sample],
    params: &mut ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<ForwardOutput>), ModelError> {
    let mut stats = params.head_stats.clone();
    let pass = run_batch(samples, params, &mut stats, config, mode, seed)?;
    let labels = labels_of(samples);
    let loss = bce_loss(&pass.probs, &labels);
    let d_probs = bce_backward(&pass.probs, &labels);
    backward_batch(&pass, params, &d_probs)?;
    params.head_stats = stats;
    Ok((loss, pass.outputs))
}
