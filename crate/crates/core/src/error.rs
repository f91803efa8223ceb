use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown entity id `{0}`")]
    UnknownEntity(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vocabulary too small: need {required} words, have {available}")]
    InsufficientVocab { required: usize, available: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("rollback requested without a pristine adapter")]
    MissingPristine,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
