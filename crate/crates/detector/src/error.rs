use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Core(#[from] incoforge_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sequence too long: {len} positions, model supports {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: bce={bce}, sm={sm}")]
    Divergence { epoch: usize, batch: usize, bce: f64, sm: f64 },
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;
