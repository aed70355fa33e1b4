use std::path::PathBuf;

use crossmlp_core::ModelError;
use crossmlp_data::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("step {step}: non-finite {component} loss, aborting")]
    NonFinite { step: u64, component: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("probabilities file line {line}: {msg}")]
    Probs { line: usize, msg: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}
