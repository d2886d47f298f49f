use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Raw RAE would exponentiate past the overflow cap.
    #[error("overflow risk: lambda^p * max loss = {scaled:.6e} exceeds cap {cap}")]
    OverflowRisk { scaled: f64, cap: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("no viable model: all {runs} grid runs diverged")]
    NoViableModel { runs: usize },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("transport error fetching {url}: {message}")]
    Transport { url: String, message: String },

    #[error("integrity error for {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } | Error::Integrity { .. } => 2,
            Error::Diverged { .. } | Error::NoViableModel { .. } => 3,
            _ => 1,
        }
    }
}
