use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: unknown {taxonomy} label {token:?}")]
    UnknownLabel {
        line: usize,
        taxonomy: &'static str,
        token: String,
    },

    #[error("line {line}: missing field {field:?}")]
    MissingField { line: usize, field: &'static str },

    #[error("line {line}: {field:?} must be non-empty")]
    EmptyField { line: usize, field: &'static str },

    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot pool an empty chunk list")]
    EmptyChunkList,

    #[error("class {class} has zero count; it is absent from the training data")]
    ZeroClassCount { class: usize },

    #[error("clarity class {class:?} has {count} instances, fewer than k = {folds} folds")]
    ClassTooSmall {
        class: String,
        count: usize,
        folds: usize,
    },

    #[error("non-finite loss at fold seed {seed}, epoch {epoch}, step {step}")]
    NonFiniteLoss { seed: u64, epoch: usize, step: usize },

    #[error("checkpoint configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("Fleiss kappa undefined: expected agreement equals 1")]
    UndefinedKappa,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
