//! Mini-batch training with a triangular cyclic learning rate and early
//! stopping on validation loss.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{batch_loss, loss_and_backward, predict_all, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Matrix, Mode};

/// Learning-rate multiplier for single-device runs of a recipe tuned for
/// three devices.
pub const SINGLE_DEVICE_RESCALE: f64 = 0.577_350_269_189_625_8; // 1/√3

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batching {0} samples leaves a batch of size 1")]
    BatchOfOne(usize),
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_max: f64,
    /// Multiplies both learning-rate bounds.
    pub lr_rescale: f64,
    /// Half-cycle length of the triangular schedule, in epochs.
    pub cycle_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr_init: 9e-5,
            lr_max: 5e-4,
            lr_rescale: 1.0,
            cycle_epochs: 4,
            patience: 5,
            max_epochs: 100,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr_init > 0.0 && self.lr_init <= self.lr_max) {
            return bad("need 0 < lr_init <= lr_max");
        }
        if !(self.lr_rescale > 0.0 && self.lr_rescale.is_finite()) {
            return bad("lr_rescale must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.cycle_epochs < 1 {
            return bad("cycle_epochs must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

/// Triangular cyclic learning rate.
///
/// Rises linearly from `lr_init·rescale` to `lr_max·rescale` over
/// `cycle_epochs·steps_per_epoch` steps, falls back over the same span, and
/// repeats. Both bounds are hit exactly.
pub fn cyclic_lr(global_step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let half = (config.cycle_epochs * steps_per_epoch.max(1)).max(1);
    let pos = global_step % (2 * half);
    let t = if pos <= half {
        pos as f64 / half as f64
    } else {
        (2 * half - pos) as f64 / half as f64
    };
    let lo = config.lr_init * config.lr_rescale;
    let hi = config.lr_max * config.lr_rescale;
    lo * (1.0 - t) + hi * t
}

/// Gradient-based parameter updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| -> Vec<Matrix> {
            p.tensors()
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect()
        };
        let (first, second) = match kind {
            OptimizerKind::Adam { .. } => (zeros(params), zeros(params)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            step: 0,
            first,
            second,
        }
    }

    /// Applies the accumulated gradients with learning rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for t in params.tensors_mut() {
                    for (v, g) in t.value.data_mut().iter_mut().zip(t.grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((t, m), s) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let values = t.value.data_mut();
                    let grads = t.grad.data();
                    for (i, g) in grads.iter().enumerate() {
                        let mi = &mut m.data_mut()[i];
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        let si = &mut s.data_mut()[i];
                        *si = beta2 * *si + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let s_hat = *si / bc2;
                        values[i] -= lr * m_hat / (s_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Outcome of feeding one epoch's validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of the best validation loss so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopSignal {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopSignal::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate of the last step in the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

/// Splits `n` items into consecutive batches of `batch_size`. A trailing
/// batch of one is merged into its predecessor.
pub fn batch_ranges(n: usize, batch_size: usize) -> Result<Vec<Range<usize>>, TrainError> {
    if n < 2 {
        return Err(TrainError::BatchOfOne(n));
    }
    let mut ranges: Vec<Range<usize>> = (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() == 1) {
        let last = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("predecessor").end = last.end;
    }
    Ok(ranges)
}

pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_with_progress(train_set, val_set, model_config, train_config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    train_set: &[Sample],
    val_set: &[Sample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    train_config.validate()?;
    model_config.validate()?;
    let batches = batch_ranges(train_set.len(), train_config.batch_size)?;
    let steps_per_epoch = batches.len();

    let mut params = ModelParams::init(model_config, train_config.seed)?;
    let mut optimizer = Optimizer::new(train_config.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5EED_0F0F_u64);
    let mut stopper = EarlyStopping::new(train_config.patience);
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_refs: Vec<&Sample> = val_set.iter().collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
    };
    let mut global_step = 0usize;
    let mut lr = cyclic_lr(0, steps_per_epoch, train_config);

    for epoch in 1..=train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for range in &batches {
            let batch: Vec<&Sample> = order[range.clone()].iter().map(|&i| &train_set[i]).collect();
            lr = cyclic_lr(global_step, steps_per_epoch, train_config);
            let batch_seed: u64 = rng.gen();
            params.zero_grad();
            let (loss, _) =
                loss_and_backward(&batch, &mut params, model_config, Mode::Train, batch_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            optimizer.step(&mut params, lr);
            loss_sum += loss * batch.len() as f64;
            global_step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = batch_loss(&val_refs, &params, model_config, Mode::Eval, 0)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let outputs = predict_all(val_set, &params, model_config)?;
        let correct = outputs
            .iter()
            .zip(val_set)
            .filter(|(o, s)| (o.prediction.p_class >= model_config.threshold) == s.is_falsified())
            .count();
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy: correct as f64 / val_set.len() as f64,
            learning_rate: lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        history.stopped_epoch = epoch;
        match stopper.update(epoch, val_loss) {
            StopSignal::Improved => best_params = params.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best_params, history))
}
