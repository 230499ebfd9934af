use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },
    #[error("optimizer contract violated: {0}")]
    Optimizer(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("unknown word id {word} for language {lang}")]
    Vocabulary { lang: usize, word: usize },
    #[error("task error: {0}")]
    Task(String),
    #[error("reference is empty after normalization")]
    UndefinedReference,
    #[error("reference/hypothesis count mismatch: {refs} vs {hyps}")]
    Pairing { refs: usize, hyps: usize },
    #[error("training diverged at step {step} (stage {stage}): loss = {loss}")]
    Divergence { stage: String, step: usize, loss: f32 },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("invalid field `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("refusing to overwrite completed run in {0} (pass --force)")]
    OutputExists(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
