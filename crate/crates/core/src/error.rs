use thiserror::Error;

#[derive(Debug, Error)]
pub enum AfinError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AfinError> = std::result::Result<T, E>;
