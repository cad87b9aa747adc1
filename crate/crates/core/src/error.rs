use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {0} has no visible entries")]
    FullyMasked(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("kv store: {0}")]
    Kv(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },

    #[error("residual distribution has zero mass")]
    ZeroResidual,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
