use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence length {len} must be even for the {kind} transform")]
    OddLength { len: usize, kind: &'static str },

    #[error("non-finite value in {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}:{line}:{column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint does not match configuration:\n{0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure in `{param}`: {msg}")]
    Numeric { param: String, msg: String },

    #[error("{stage}: {msg}")]
    Contract { stage: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 usage/configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch(_) => 1,
            Error::Numeric { .. } | Error::Domain(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn ensure_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(what.to_string()))
    }
}
