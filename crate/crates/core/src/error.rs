use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("modality mismatch: {0}")]
    Modality(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {term}: {detail}")]
    NonFinite { term: String, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("interrupted after {0} videos")]
    Interrupted(usize),

    #[error("adapter {adapter} failed: {message}")]
    Adapter { adapter: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn adapter(adapter: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Adapter {
            adapter: adapter.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running. The CLI maps these to exit code 1.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Parameter(_)
                | Error::Validation(_)
                | Error::Modality(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::UndefinedMetric(_)
        )
    }
}
