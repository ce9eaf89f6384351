use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An index (line, token, concept) outside the value it indexes into.
    #[error("{what} {index} out of range (len {len})")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// A numeric argument outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side contract was broken (mismatched lengths, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("embedding service transport failure: {0}")]
    Transport(String),

    #[error("malformed embedding service response: {0}")]
    MalformedResponse(String),

    #[error("embedding dimension {got} does not match session dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index was built with provider {stored}, live provider is {live}")]
    ProviderMismatch { stored: String, live: String },

    #[error("duplicate corpus ids: {0:?}")]
    DuplicateIds(Vec<String>),

    #[error("invalid {what} file {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Diverged { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            what,
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
