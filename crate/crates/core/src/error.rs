use thiserror::Error;

/// Errors raised by the numeric core and the run orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix not positive definite after {retries} jitter retries")]
    NotPositiveDefinite { retries: usize },

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("no initialized mixture mode")]
    NoInitializedMode,

    #[error("thresholds already frozen")]
    AlreadyFrozen,

    #[error("batch of {0} samples too small for threshold calibration (need at least 4)")]
    BatchTooSmall(usize),

    #[error("thresholds not calibrated yet")]
    Uncalibrated,

    #[error("invalid class split: {0}")]
    InvalidSplit(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure at batch {batch}: {source}")]
    Numerical {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
