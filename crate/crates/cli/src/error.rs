use std::fmt::Display;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{flag}: {msg}")]
    Config { flag: String, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn config(flag: &str, msg: impl Display) -> Self {
        CliError::Config {
            flag: flag.to_string(),
            msg: msg.to_string(),
        }
    }

    pub fn io(path: &Path, msg: impl Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            msg: msg.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Internal(_) => 4,
        }
    }
}
