//! Error taxonomy shared by all modules.
//!
//! Exit-code mapping for the CLI: `Validation` failures map to exit 1,
//! everything else that reaches the top level maps to exit 2.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch in a tensor primitive, naming the primitive and axes.
    #[error("dimension error in `{primitive}`: {detail}")]
    Dimension {
        primitive: &'static str,
        detail: String,
    },

    /// A run was configured with inconsistent or unusable settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. non-scalar loss, length mismatch).
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad input data (e.g. a token id outside the active vocabulary).
    #[error("input error: {0}")]
    Input(String),

    /// A non-finite value surfaced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Data failed validation against its declared format.
    #[error("validation error: {0}")]
    Validation(String),

    /// A persisted artifact is corrupt or inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (last finite checkpoint: {last_checkpoint:?})")]
    Diverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
