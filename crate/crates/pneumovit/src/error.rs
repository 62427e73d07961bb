use std::path::PathBuf;

use thiserror::Error;

/// Failures of the std layer, each mapped onto a process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Runtime(_) | AppError::Io { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    /// Core failures raised while handling data: protocol problems stay data
    /// errors, anything else is a runtime failure.
    pub fn from_core(e: pneumovit_core::Error) -> Self {
        match e {
            pneumovit_core::Error::Protocol(_) => AppError::Data(e.to_string()),
            _ => AppError::Runtime(e.to_string()),
        }
    }

    /// Core failures raised while validating configuration.
    pub fn config_from_core(e: pneumovit_core::Error) -> Self {
        AppError::Config(e.to_string())
    }
}
