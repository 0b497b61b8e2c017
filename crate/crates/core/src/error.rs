use crate::vocab::Token;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds model context length {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfVocab(Token),

    #[error("context {0:?} has no row in the tabular table")]
    UnknownContext(Vec<Token>),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("loss node does not belong to this graph")]
    ForeignNode,

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
