use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural hyperparameter does not fit the tensor it is applied to.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("pruning plan rejected: {0}")]
    Plan(String),

    #[error("scorer error: {0}")]
    Scorer(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
