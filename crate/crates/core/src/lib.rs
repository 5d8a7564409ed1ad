//! Layer pruning toolkit for BERT-style encoders.
//!
//! ```text
//! checkpoint ──prune──▶ shallower checkpoint ──finetune──▶ evaluate ──▶ report
//! ```
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32`, gradient
//! checks `f64`. The aliases below name the common instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod protocol;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelWeights};
pub use pruning::{PruneRecord, PruneSpec, Strategy};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelWeights32 = ModelWeights<f32>;
pub type ModelWeights64 = ModelWeights<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
