//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, the differentiation graph, data I/O and
/// the training loop.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch; the message names the offending axes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Empty tensor where a non-empty one is required.
    #[error("empty tensor: {0}")]
    EmptyTensor(String),

    /// NaN or Inf crossing a graph boundary.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of the differentiation graph (non-scalar root, double backward,
    /// values from different graphs).
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or volume file format/version mismatch.
    #[error("format error: {0}")]
    Format(String),

    /// Numeric abort (NaN loss during training); carries a diagnostic dump.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Invalid data (manifest entries, fold arguments, ROI bounds, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
