use thiserror::Error;

/// Errors raised by the optimizer, estimators and data utilities.
#[derive(Debug, Error)]
pub enum PdaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid label {0}: classification losses need y in {{-1, +1}}")]
    InvalidLabel(f64),

    #[error("index {index} out of range for dataset of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("divergence: |theta| = {value:e} exceeded {limit:e} at outer step {outer_step}")]
    Divergence {
        value: f64,
        limit: f64,
        outer_step: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data source exhausted: {0}")]
    DataExhausted(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PdaError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(PdaError::DimensionMismatch { expected, got });
    }
    Ok(())
}
