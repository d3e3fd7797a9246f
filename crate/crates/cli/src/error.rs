use std::path::PathBuf;

use grm_tracker::TrackerError;
use thiserror::Error;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NON_FINITE: i32 = 3;
    pub const VERSION: i32 = 4;
    pub const GRAD_CHECK: i32 = 5;
    pub const RUNTIME: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tracker(#[from] TrackerError),

    #[error(transparent)]
    Core(#[from] grm_core::Error),

    #[error("gradient check failed: {name} has relative error {rel_err:.3e}")]
    GradCheck { name: String, rel_err: f64 },
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
            CliError::GradCheck { .. } => exit::GRAD_CHECK,
            CliError::Core(grm_core::Error::Config(_)) => exit::CONFIG,
            CliError::Core(_) => exit::RUNTIME,
            CliError::Tracker(t) => match t {
                TrackerError::Io(_) => exit::IO,
                TrackerError::Config(_) | TrackerError::Core(grm_core::Error::Config(_)) => exit::CONFIG,
                TrackerError::NonFinite { .. } => exit::NON_FINITE,
                TrackerError::Version { .. } => exit::VERSION,
                _ => exit::RUNTIME,
            },
        }
    }
}
