use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A config key path that does not exist in the schema or has the wrong type.
    #[error("schema violation at `{path}`: {reason}")]
    Schema { path: String, reason: String },

    #[error("ingestion error for {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("key error: {0}")]
    Key(String),

    #[error("type error: {0}")]
    Type(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An artifact produced by an earlier pipeline stage is missing.
    #[error("missing upstream artifact for stage `{stage}`; run `{requires}` first")]
    MissingArtifact { stage: String, requires: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// The innermost error under any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e @ Error::MissingArtifact { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
