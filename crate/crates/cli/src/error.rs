use std::path::PathBuf;

use clarity_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig(_) | CoreError::ConfigMismatch(_) => exit::CONFIG,
                CoreError::Io { .. } => exit::IO,
                CoreError::NonFiniteLoss { .. }
                | CoreError::UndefinedKappa
                | CoreError::Shape(_)
                | CoreError::EmptyChunkList => exit::NUMERIC,
                _ => exit::DATA,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
