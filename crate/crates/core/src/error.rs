use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, config fields or spec values that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN or infinity produced by an operation.
    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: String },

    /// API misuse, e.g. backward from a detached tensor.
    #[error("usage error: {0}")]
    Usage(String),

    /// Parameter file could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Annotation or data file could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Per-sample evaluation failure.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller should report as bad input rather than a runtime failure.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Load(_) | Error::Parse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
