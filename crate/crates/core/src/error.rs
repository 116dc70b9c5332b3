use std::io;
use std::path::PathBuf;

use mom_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Invalid or inconsistent configuration (bad dims, plan/layer mismatch, unknown key).
    #[error("{0}")]
    Config(String),

    #[error("cannot parse {what} {input:?}: {msg} at position {pos}")]
    Parse {
        what: &'static str,
        input: String,
        pos: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("non-finite gradient in parameter {name} at step {step}")]
    NonFiniteGradient { name: String, step: usize },

    #[error("{0}")]
    Contract(String),
}

impl MomError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MomError::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        MomError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        MomError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MomError>;
