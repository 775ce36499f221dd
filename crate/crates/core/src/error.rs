//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an API contract (shape mismatch, missing forward pass, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed input data.
    #[error("input error: {0}")]
    Input(String),

    /// A NaN or infinity was produced.
    #[error("numeric fault in {context}")]
    NumericFault { context: String },

    /// The requested computation is deliberately gated.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::NumericFault {
            context: context.into(),
        }
    }
}
