//! Error type shared by every module, with the process exit code mapping
//! used by the CLI (0 ok, 2 config, 3 data, 4 numerical).

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, RadaError>;

#[derive(Debug, Error)]
pub enum RadaError {
    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("encoder backend error: {0}")]
    Backend(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RadaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RadaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            RadaError::Config(_) => 2,
            RadaError::Numerical(_) => 4,
            _ => 3,
        }
    }
}
