use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("ingestion error for {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: u64, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
