use std::path::Path;

/// Lab-side errors, mapped onto process exit codes by the CLI:
/// 1 usage, 2 contract violation, 3 numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Contract(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<mpn_core::Error> for Error {
    fn from(e: mpn_core::Error) -> Self {
        match e {
            mpn_core::Error::Numeric(msg) => Error::Numeric(msg),
            other => Error::Contract(other.to_string()),
        }
    }
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! usage_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Usage(format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use usage_err;
