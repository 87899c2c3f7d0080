use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::reweight::OracleResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library surfaces. Each variant maps onto one of the
/// CLI exit-code categories, see [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("oracle did not converge after {} iterations (kkt residual {residual:.3e})", best.iterations)]
    NonConvergence {
        best: Box<OracleResult>,
        residual: f64,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config {origin}: {message}")]
    Config { origin: String, message: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

/// Exit-code categories reported by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    Numeric,
    Verification,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Io => 4,
            Category::Numeric => 5,
            Category::Verification => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Numeric => "numeric",
            Category::Verification => "verification",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Usage(_) => Category::Usage,
            Error::Config { .. } | Error::InvalidParameter(_) => Category::Config,
            Error::Io { .. } | Error::Format { .. } => Category::Io,
            Error::InvalidInput(_) | Error::NonConvergence { .. } | Error::Numeric(_) => {
                Category::Numeric
            }
            Error::Verification(_) => Category::Verification,
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }
}
