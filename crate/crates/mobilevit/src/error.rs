//! Crate-wide error type. Every fallible operation reports enough context to
//! identify the offending op and shapes without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement. `detail` names both shapes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced NaN or Inf. Values on the tape are finite by contract.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Backward was asked to start from a non-scalar value.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A variable handle from a different (or newer) tape was used.
    #[error("variable #{id} does not belong to this tape ({len} nodes)")]
    ForeignVar { id: usize, len: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; training aborted")]
    Diverged { epoch: usize, batch: usize },

    #[error("weights file: {0}")]
    Weights(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("prediction matrix: {0}")]
    Predictions(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for the common "expected X, got Y" shape report.
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
