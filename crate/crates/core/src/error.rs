use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds context length {max}")]
    Length { len: usize, max: usize },

    #[error("latent index {index} out of range for {limit} latents")]
    Index { index: usize, limit: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("no latent has positive influence")]
    EmptySelection,

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
