//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by panel ingestion, estimation, and evaluation.
#[derive(Debug, Error)]
pub enum CocoError {
    /// Input file could not be opened or read.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed data in an input file; `line` is 1-based and includes the header.
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Data violates a documented precondition (empty panel, missing values, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Shapes of two operands disagree.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    /// An argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed (non-convergence, non-finite values, loss of definiteness).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Serialization or deserialization of a document failed.
    #[error("serialization error: {0}")]
    Serde(String),
}

impl CocoError {
    pub(crate) fn dim(expected: impl ToString, actual: impl ToString) -> Self {
        CocoError::Dimension {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CocoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for CocoError {
    fn from(e: serde_json::Error) -> Self {
        CocoError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CocoError>;
