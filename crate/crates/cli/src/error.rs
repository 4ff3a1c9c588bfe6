use std::path::{Path, PathBuf};

use thiserror::Error;
use urm_core::UrmError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 configuration, 3 I/O or file format, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<UrmError> for CliError {
    fn from(e: UrmError) -> Self {
        match e {
            UrmError::Config(m) | UrmError::InvalidInput(m) => CliError::Config(m),
            UrmError::Diverged { .. } => CliError::Diverged(e.to_string()),
            UrmError::Io { path, source } => CliError::Io { path, source },
            UrmError::Format { path, reason } => CliError::Format { path, reason },
        }
    }
}
