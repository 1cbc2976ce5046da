use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("inconsistent generation step: {0}")]
    InconsistentStep(String),

    #[error("invalid trace: {0:?}")]
    InvalidTrace(Vec<String>),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position {0} out of range for length {1}")]
    PositionOutOfRange(usize, usize),

    #[error("model error: {0}")]
    Model(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),
}

pub type Result<T> = std::result::Result<T, Error>;
