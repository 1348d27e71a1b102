use std::path::{Path, PathBuf};

use dicelab_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure class, shared by the `ERROR(<class>)` prefix and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 1,
            ErrorClass::Data | ErrorClass::Io => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Core(CoreError::Config(_)) => ErrorClass::Config,
            Error::Core(CoreError::Numeric(_)) => ErrorClass::Numeric,
            Error::Core(_) | Error::Format { .. } => ErrorClass::Data,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Config(msg.into()))
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Data(msg.into()))
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// Attaches a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
