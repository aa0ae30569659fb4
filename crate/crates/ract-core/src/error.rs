use thiserror::Error;

/// Unified error type for the training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left}, right is {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("NaN gradient in parameter block `{0}`")]
    NanGradient(String),

    #[error("batch normalization in train mode needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ranking error: {0}")]
    Ranking(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
