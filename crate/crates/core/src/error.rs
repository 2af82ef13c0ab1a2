use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The regressors do not span the feature space; more varied driving is needed.
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("powertrain parameters are not identifiable: {0}")]
    NonIdentifiable(String),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("empty command history")]
    EmptyHistory,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("input-space characterization failed: {0}")]
    Characterization(String),

    #[error("dataset needs at least two training intervals, found {0}")]
    TooFewIntervals(usize),

    /// A file violated its schema. `line` is 1-based.
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
