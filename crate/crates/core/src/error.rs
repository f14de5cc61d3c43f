use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("audio file referenced by the manifest does not exist: {0}")]
    MissingAudio(PathBuf),

    #[error("malformed manifest line {line}: {message}")]
    MalformedManifest { line: usize, message: String },

    #[error("duplicate utterance id \"{0}\"")]
    DuplicateId(String),

    #[error("sample rate mismatch in {path}: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("wav error in {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no voiced frames")]
    NoVoicedFrames,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token \"{0}\" is not in the vocabulary")]
    UnknownToken(String),

    #[error("vocabulary id {id} out of range for vocabulary of size {size}")]
    VocabOutOfRange { id: usize, size: usize },

    #[error("model uses style tokens but no reference or token weights were supplied")]
    MissingReference,

    #[error("non-finite loss at step {step} (batch utterances: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
