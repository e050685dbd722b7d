//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Every fallible operation returns [`Result`].
#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition stated by the operation's contract was violated.
    #[error("contract violation in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. Stored tensors must stay finite.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// CSV ingestion failure, located by 1-based file row (header = row 1)
    /// and column name (empty when the whole row is at fault).
    #[error("ingestion error in {path} (row {row}, column {column}): {detail}")]
    Ingest {
        path: String,
        row: usize,
        column: String,
        detail: String,
    },

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
