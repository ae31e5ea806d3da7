use std::path::{Path, PathBuf};

use lap_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// A caller-side precondition was violated.
    #[error("{0}")]
    Contract(String),
    #[error("{0}: empty domain")]
    EmptyDomain(&'static str),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Staging(String),
    #[error("{0}")]
    Capability(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Unreadable or malformed files map to exit status 2, everything else
    /// to 1.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Tensor(TensorError::Io(_) | TensorError::Format(_))
        )
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Lets model code run inside tensor-level closures such as gradient checks.
impl From<Error> for TensorError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "lap-core",
                msg: other.to_string(),
            },
        }
    }
}
