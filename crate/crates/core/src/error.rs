use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Numeric failure during training, with the batch that triggered it.
    #[error("numeric failure at epoch {epoch}, batch {step}: {message}")]
    Diverged {
        message: String,
        epoch: usize,
        step: usize,
        sample_ids: Vec<u64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code: 1 verification failure, 2 config error, 3 runtime
    /// numeric failure. Everything else that stops a command before compute
    /// counts as a config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
