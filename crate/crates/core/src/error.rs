use exitpipe_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("pipeline protocol violation: {0}")]
    Protocol(String),
    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),
    #[error("bubble fill: {0}")]
    Fill(String),
    #[error("context overflow: {needed} positions exceed max_seq_len {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("degenerate distribution: {0}")]
    Distribution(String),
    #[error("inference modes diverge for prompt {prompt} at threshold {threshold}, token {position}")]
    Divergence { prompt: usize, threshold: f64, position: usize },
    #[error("worker panicked: {0}")]
    Worker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
