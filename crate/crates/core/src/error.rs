use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UrmError {
    /// Inconsistent dimensions, invalid hyperparameters, or mismatched models.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that violates an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, UrmError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(UrmError::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(UrmError::InvalidInput(msg.into()))
}
