use std::path::PathBuf;

use thiserror::Error;

/// CLI failures. Usage problems exit with 1, everything else with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maskwright::Error),
    #[error("{path}: corrupt model file: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: model file version {found} is newer than supported version {supported}")]
    Version { path: PathBuf, found: u16, supported: u16 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
