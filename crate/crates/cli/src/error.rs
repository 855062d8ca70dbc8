use thiserror::Error;

use hpcc_core::edf::EdfError;
use hpcc_core::hooks::PipelineFailure;
use hpcc_core::imagestore::ImageStoreError;
use hpcc_core::launchsim::SimError;
use hpcc_core::plan::PlanError;

use crate::pod::PodError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const INVALID: i32 = 2;
    pub const STORE: i32 = 3;
    pub const SIMULATION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error(transparent)]
    Store(#[from] ImageStoreError),
    #[error("hook pipeline: {0}")]
    Hooks(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    SimFailed(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Hooks(_) | CliError::Runtime(_) => exit::RUNTIME,
            CliError::Usage(_) | CliError::Edf(_) | CliError::Plan(_) | CliError::Pod(_) => {
                exit::INVALID
            }
            CliError::Store(_) => exit::STORE,
            CliError::Sim(SimError::Store(_)) => exit::STORE,
            CliError::Sim(_) | CliError::SimFailed(_) => exit::SIMULATION,
        }
    }
}

impl From<PipelineFailure> for CliError {
    fn from(f: PipelineFailure) -> Self {
        CliError::Hooks(f.to_string())
    }
}
