//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Validation` and `Shape` mark bad inputs (rejected before any work is
/// done); `Format` marks unreadable on-disk data; `Numeric` marks a
/// computation that produced non-finite values.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand used all over the crate for precondition checks.
macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)*) => {
        match $cond {
            true => {}
            false => return Err(crate::error::Error::$kind(format!($($arg)*))),
        }
    };
}
pub(crate) use ensure;
