use thiserror::Error;

/// Errors produced by the search stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate likelihood: true label unreachable for validation points {points:?}")]
    DegenerateLikelihood { points: Vec<usize> },

    #[error("missing feature: {0}")]
    MissingFeature(String),

    #[error("every record was empty after filtering")]
    EmptyBatch,

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("index build failed: {0}")]
    Build(String),

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("no shard available: {0}")]
    Unavailable(String),

    #[error("training labels contain a single class")]
    DegenerateLabels,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        Error::Dimension { expected, actual }
    }
}
