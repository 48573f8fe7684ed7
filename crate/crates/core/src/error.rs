use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input value {0}")]
    NonFinite(f64),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("instruction {index} ({text}): {message}")]
    Execution {
        index: usize,
        text: String,
        message: String,
    },

    #[error("trace {trace}: {source}")]
    Trace {
        trace: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rewrite plan is stale: {0}")]
    StalePlan(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
