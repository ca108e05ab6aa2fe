use std::path::PathBuf;

use thiserror::Error;

/// Process exit status of the `memfine` binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 1,
    Infeasible = 2,
    PropertyFailure = 3,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] memfine_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("property check failed (seed {seed}): {what}")]
    Property { seed: u64, what: String },
}

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Parse { path: path.into(), message: message.to_string() }
    }

    pub fn exit(&self) -> Exit {
        match self {
            RunError::Core(memfine_core::Error::StaticInfeasible { .. }) | RunError::Infeasible(_) => Exit::Infeasible,
            RunError::Property { .. } => Exit::PropertyFailure,
            _ => Exit::Config,
        }
    }
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;
