use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input coordinate")]
    NonFiniteInput,

    #[error("matrix not positive definite after jitter escalation (last jitter {last_jitter:e})")]
    FactorizationFailed { last_jitter: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("active candidate set is empty")]
    EmptyCandidateSet,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
