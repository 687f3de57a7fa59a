use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Harness errors carry a stable diagnostic code; configuration problems
/// and numerical aborts map to distinct process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("[{code}] {message}")]
    Config { code: &'static str, message: String },

    #[error("[E_NUMERICAL] {0}")]
    Numerical(String),

    #[error("[E_IO] {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl Error {
    pub fn config(code: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Io { .. } => EXIT_IO,
        }
    }
}

/// Core numerical failures abort the run; everything else points at the
/// configuration that produced the call.
impl From<p2flow_core::Error> for Error {
    fn from(e: p2flow_core::Error) -> Self {
        match &e {
            p2flow_core::Error::Blowup { .. } | p2flow_core::Error::NonFinite { .. } => {
                Error::Numerical(e.to_string())
            }
            _ => Error::config("E_CORE", e.to_string()),
        }
    }
}
