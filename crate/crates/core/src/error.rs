use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid model config: {0}")]
    Config(String),

    /// Bad model input: token id out of range, sequence too long, empty mask row.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid prune spec: {0}")]
    PruneSpec(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    /// Dataset or vocabulary parsing failure.
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
