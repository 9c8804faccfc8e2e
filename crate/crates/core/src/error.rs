use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a feature file")]
    NotFeatureFile,

    #[error("feature file: {msg} at offset {offset}")]
    FeatureFormat { offset: u64, msg: String },

    #[error("feature file truncated at offset {offset}: expected {expected} bytes, got {got}")]
    Truncated {
        offset: u64,
        expected: u64,
        got: u64,
    },

    #[error("feature shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("{what}: dimension mismatch, expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("model {path}: {msg}")]
    Model { path: PathBuf, msg: String },

    #[error("proposal file: {0}")]
    Proposal(String),

    #[error("matching: {0}")]
    Matching(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a description of what was being processed.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// `true` for failures caused by bad input files, paths or flags.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Matching(_) | Error::Metrics(_) => false,
            Error::Context { source, .. } => source.is_input_error(),
            _ => true,
        }
    }

    /// Process exit code: 2 for input/config errors, 1 for failures during
    /// matching or metric computation.
    pub fn exit_code(&self) -> i32 {
        if self.is_input_error() {
            2
        } else {
            1
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
