use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration key or value was rejected. `key` names the offending entry.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("ingestion error at {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// Non-finite values or an ill-posed numeric problem.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an operation's precondition (shape, index, missing state).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("format error at {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io { .. } | Error::Image { .. } => 1,
            _ => 2,
        }
    }
}
