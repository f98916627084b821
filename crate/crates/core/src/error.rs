use std::path::PathBuf;

use crate::embed::EmbedError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Embed(#[from] EmbedError),

    #[error("corpus line {line}: {message}")]
    CorpusLine { line: usize, message: String },

    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("dataset line {line}: {message}")]
    DatasetLine { line: usize, message: String },

    #[error("invalid replay script: {0}")]
    Script(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad input rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Embed(EmbedError::Transport { .. }))
    }
}
