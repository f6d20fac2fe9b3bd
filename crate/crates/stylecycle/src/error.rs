use std::path::PathBuf;

use stylecycle_core::Error as CoreError;

/// Error category printed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Gate,
    Numeric,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "CONFIG",
            Category::Data => "DATA",
            Category::Gate => "GATE",
            Category::Numeric => "NUMERIC",
            Category::Io => "IO",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Gate => 4,
            Category::Numeric => 5,
            Category::Io => 6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Gate(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Core(e) => match e {
                CoreError::Config(_) => Category::Config,
                CoreError::Gate { .. } | CoreError::NotPretrained => Category::Gate,
                CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } => Category::Numeric,
                _ => Category::Data,
            },
            Error::Io { .. } => Category::Io,
            Error::Format { .. } => Category::Data,
            Error::Config(_) => Category::Config,
            Error::Gate(_) => Category::Gate,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
