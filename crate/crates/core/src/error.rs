use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor or image dimensions that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),
    /// Input data that violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A caller broke an API contract (for example denoising queries at inference).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or incompatible file contents.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    /// Optimization diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors detected before any computation (exit code 1).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape(_) | Error::Input(_) | Error::Contract(_)
        )
    }
}
