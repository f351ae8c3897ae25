use thiserror::Error;
use vhrnn::dataio::DataError;
use vhrnn::diagnostics::DiagError;
use vhrnn::models::ModelError;
use vhrnn::objectives::ObjectiveError;
use vhrnn::synthdata::SynthError;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("training stopped: {source}; last good state is in {last}")]
    Diverged { source: ObjectiveError, last: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 1 for problems with the user's input, 2 for internal failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Diverged { .. } | CliError::Objective(_) => 2,
            CliError::Diag(DiagError::Model(_) | DiagError::Tensor(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
