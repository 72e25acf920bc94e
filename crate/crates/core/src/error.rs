use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("conversation {id}: {message}")]
    InvalidConversation { id: String, message: String },

    #[error("unknown {kind} label {name:?} in conversation {id}")]
    UnknownLabel {
        kind: &'static str,
        name: String,
        id: String,
    },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing embedding for key {0:?}")]
    MissingEmbedding(String),

    #[error("unknown document key {0:?}")]
    UnknownDocument(String),

    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("negative adjacency entry {value} at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize, value: f64 },

    #[error("training diverged at {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged(_) | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
