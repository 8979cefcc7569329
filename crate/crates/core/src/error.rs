use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter sets are not shape-compatible: {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error("non-finite value at node {index} ({op})")]
    NonFinite { index: usize, op: &'static str },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error("token id {0} is reserved or out of range")]
    BadToken(usize),

    #[error("vocabulary target size {target} is below the character inventory {chars}")]
    VocabTooSmall { target: usize, chars: usize },

    #[error("infeasible alignment: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("lm head is missing; run the LM-head estimation step (train-lm-head) before adapting")]
    MissingLmHead,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
