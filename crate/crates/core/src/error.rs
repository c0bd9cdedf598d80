//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or Inf appeared in the output of a forward operation.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// The tensor container (or a checkpoint built from it) is malformed.
    /// `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Bad run configuration (missing paths, unknown keys, empty datasets).
    #[error("configuration error: {0}")]
    Config(String),

    /// Phantom geometry could not be placed within the retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// A dosimetric quantity is undefined for the given inputs (e.g. D50 = 0).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training diverged (non-finite loss mid-run).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Invariant violation inside the engine itself.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
