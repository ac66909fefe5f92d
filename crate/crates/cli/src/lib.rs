//! Library side of the `rr` binary: configuration, backend wiring, run
//! manifests and one function per subcommand.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod wiring;

use std::path::PathBuf;

use rr_core::adapters::AdapterError;
use rr_core::backends::BackendError;
use rr_core::datagen::DatagenError;
use rr_core::diversity::DiversityError;
use rr_core::subspace::SubspaceError;
use rr_core::unlearn::UnlearnError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Datagen(e) => e.kind(),
            CliError::Unlearn(e) => e.kind(),
            CliError::Backend(e) => e.kind(),
            CliError::Adapter(e) => e.kind(),
            CliError::Subspace(_) => "SubspaceError",
            CliError::Diversity(_) => "DiversityError",
            CliError::Io { .. } => "IoError",
        }
    }

    /// 2 for configuration problems, 1 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
