use alloc::string::String;
use core::fmt;

/// Errors produced by the core engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not line up; the message carries a dimension report.
    Shape(String),
    /// An argument violates an operation's contract (bad label, empty batch, ...).
    Invalid(String),
    /// A computation produced or encountered a non-finite value.
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! invalid_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}

pub(crate) use invalid_err;
pub(crate) use shape_err;
