use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("degenerate transform (|det| = {det:e})")]
    DegenerateTransform { det: f64 },

    #[error("registration failed: {reason} (final similarity {similarity})")]
    Registration { reason: String, similarity: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed for subject `{subject}`: {source}")]
    Stage {
        stage: String,
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the pipeline stage and subject that produced it.
    pub fn in_stage(self, stage: &str, subject: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors that stem from bad inputs or configuration rather than
    /// a failure while processing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) | Error::Config(_) | Error::GeometryMismatch(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
