use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Every fallible public operation returns this.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument or configuration value is out of range or
    /// inconsistent with other settings.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor dimensions do not match what an operation requires.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Filesystem failure, always carrying the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents: manifest schema violations, unreadable
    /// images, corrupt checkpoints. `message` names the line or field when
    /// one is known.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// A computation produced a non-finite value or was asked to operate on
    /// one (e.g. training loss diverged).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Stable machine-readable tag, used by the CLI's structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape { .. } => "shape",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Numeric(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
