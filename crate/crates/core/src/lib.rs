//! Out-of-context image/caption detection over precomputed embeddings.
//!
//! The crate is split along the pipeline:
//!
//! * [`data`]: samples, evidence, the archive format and a synthetic generator.
//! * [`tensor`]: dense matrices and hand-differentiated primitives.
//! * [`attention`]: multi-head attention with backward pass.
//! * [`model`]: the five consistency blocks and the classification head.
//! * [`training`]: mini-batch training, cyclic learning rate, early stopping.
//! * [`checkpoint`]: binary checkpoint files.
//! * [`metrics`]: accuracy, ROC AUC, equal error rate.
//! * [`explain`]: evidence page selection, prompt construction, generation clients.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use data::{load_dataset, save_dataset, DatasetManifest, Sample, SynthSpec};
pub use model::{count_parameters, ModelConfig, ModelParams, Prediction, Verdict};
pub use tensor::{Matrix, Mode};
pub use training::{train, TrainConfig, TrainHistory};
