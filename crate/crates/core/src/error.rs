use hvsr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{format} parse error at byte {offset}: {msg}")]
    Parse {
        format: &'static str,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint config digest {found} does not match expected {expected}")]
    DigestMismatch { found: String, expected: String },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("decoder parameter `{0}` must be frozen before vocabulary finetuning")]
    DecoderNotFrozen(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
