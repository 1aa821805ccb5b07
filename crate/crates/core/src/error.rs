use thiserror::Error;

/// Errors surfaced by the library. Rejections during data cleaning are
/// ordinary values ([`crate::preprocess::Verdict`]), not errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("step index out of range: {0}")]
    Range(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("empty sequence: mean pooling needs at least one row")]
    EmptySequence,

    #[error("degenerate vector: norm {norm:e} below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
