use thiserror::Error;

use crate::trace_io::TraceError;

pub type Result<T> = std::result::Result<T, CmgError>;

#[derive(Debug, Error)]
pub enum CmgError {
    #[error("empty support: every position is excluded")]
    EmptySupport,

    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty attention row (layer {layer}, head {head}, query {query})")]
    EmptyAttentionRow { layer: usize, head: usize, query: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("cache/weights mismatch: {0}")]
    CacheMismatch(String),

    #[error(transparent)]
    Trace(#[from] TraceError),
}
