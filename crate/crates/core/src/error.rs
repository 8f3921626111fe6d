use thiserror::Error;

use crate::trainer::RunState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("state error: {0}")]
    State(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<RunState>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error class, used to pick the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } | Error::Checkpoint(_) | Error::Capability(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Io(_) => ErrorKind::Io,
            Error::Shape(_)
            | Error::Index(_)
            | Error::Domain(_)
            | Error::Degenerate(_)
            | Error::State(_) => ErrorKind::Internal,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
