use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("caption needs {needed} positions but max_len is {max_len}")]
    Truncation { needed: usize, max_len: usize },

    #[error("cannot normalize row {row}: zero vector")]
    Normalization { row: usize },

    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: &'static str },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus file error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
