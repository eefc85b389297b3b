use std::path::PathBuf;

/// Errors produced by the diffusion toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate symbol {0}")]
    DuplicateSymbol(String),

    #[error("empty alphabet")]
    EmptyAlphabet,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("support of {states} states exceeds the enumeration limit {limit}")]
    SupportTooLarge { states: usize, limit: usize },

    #[error("{path}:{line}: {msg}")]
    Fasta {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
