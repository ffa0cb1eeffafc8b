use thiserror::Error;
use trafficmoe::capture::CaptureError;
use trafficmoe::model::{CheckpointError, ModelError};
use trafficmoe::preprocess::DatasetError;
use trafficmoe::synth::SynthError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("gradient check failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Model(ModelError::InvalidConfig(_)) => 1,
            CliError::Synth(SynthError::InvalidSpec(_)) => 1,
            CliError::Verification(_) => 3,
            _ => 2,
        }
    }
}
