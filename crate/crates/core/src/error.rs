//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the failure classes the pipeline distinguishes:
/// shape mismatches, invalid hyperparameters, malformed input data,
/// numeric breakdowns, and internal contract violations.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or tensor shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or argument outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Unparseable file content.
    #[error("parse error: {0}")]
    Parse(String),

    /// Non-finite values or other numeric breakdowns.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An internal invariant that callers rely on was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
