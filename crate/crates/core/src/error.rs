use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint N={0} was not recorded in the trace")]
    CheckpointNotFound(u64),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("integration failure in trial {trial}: {reason}")]
    IntegrationFailure { trial: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
