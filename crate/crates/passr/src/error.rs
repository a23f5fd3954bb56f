//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: String, got: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("non-finite loss at step {step}; aborting (last good checkpoint kept)")]
    NonFiniteLoss { step: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),
}
