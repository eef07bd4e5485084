use dora_core::analysis::AnalysisError;
use dora_core::checkpoint::CheckpointError;
use dora_core::trainer::TrainError;
use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// A verification did not hold, or a run could not complete.
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Adapter { .. } => CliError::Check(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Checkpoint(inner) => inner.into(),
            AnalysisError::Io { .. } | AnalysisError::Csv { .. } => CliError::Io(e.to_string()),
            AnalysisError::Pattern(_) => CliError::Config(e.to_string()),
            _ => CliError::Check(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Check(e.to_string()),
        }
    }
}
