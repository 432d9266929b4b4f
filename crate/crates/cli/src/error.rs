use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("corrupt checkpoint {path}: {1}", path = .0.display())]
    CorruptCheckpoint(PathBuf, CheckpointError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit status: 2 usage, 3 config, 4 missing checkpoint,
    /// 5 unreadable checkpoint, 6 everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::CorruptCheckpoint(..) => 5,
            CliError::Runtime(_) => 6,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
