use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A normalization or update hit an all-zero vector.
    #[error("degenerate {0}: vector has zero norm")]
    Degenerate(&'static str),

    #[error("insufficient snapshots: need at least {needed}, got {got}")]
    InsufficientSnapshots { needed: usize, got: usize },

    #[error("model format: {0}")]
    Format(String),

    /// Malformed data file; the message names the line.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Returns an `InvalidArgument` error unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
