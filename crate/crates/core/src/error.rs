use crate::scene::Slot;

/// Errors produced by the generation, dialogue and optimization layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unspecified slot: {0}")]
    UnspecifiedSlot(Slot),
    #[error("at least one slot must be specified")]
    EmptySpec,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token weight at position {index} must be positive, got {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("contrastive batches need at least 2 pairs (no negatives), got {0}")]
    TooFewPairs(usize),
    #[error("deterministic step has no density (sigma = 0 at t = {0})")]
    ZeroSigma(usize),
    #[error("empty preference pair list")]
    EmptyPairs,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("png: {0}")]
    Png(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("implicit module invoked during inference: {0}")]
    InferencePurity(String),
    #[error("summarizer: {0}")]
    Summarizer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
