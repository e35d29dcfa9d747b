use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Zero-variance or otherwise undefined numerics.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{0}")]
    MethodUnavailable(String),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 1 = usage, 2 = data/format, 3 = numeric/degenerate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::MethodUnavailable(_) => 1,
            Error::Format { .. } | Error::Io { .. } | Error::Dimension(_) | Error::Serialize(_) => {
                2
            }
            Error::Precondition(_) | Error::Degenerate(_) | Error::Domain(_) => 3,
        }
    }
}
