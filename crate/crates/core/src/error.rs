use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EcoError>;

#[derive(Debug, Error)]
pub enum EcoError {
    #[error("entity {entity} does not match the schema: {reason}")]
    SchemaMismatch { entity: usize, reason: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("prefix is not a path in the entity trie (diverges at position {position})")]
    InvalidPrefix { position: usize },

    #[error("degenerate distribution: allowed mass {mass:e} is below the renormalization floor")]
    DegenerateDistribution { mass: f64 },

    #[error("empty allowed set")]
    EmptyAllowedSet,

    #[error("annotation error in dialog {dialog}: {reason}")]
    Annotation { dialog: String, reason: String },

    #[error(
        "trie fingerprint {found} does not match any knowledge base the model was trained with"
    )]
    StaleTrie { found: String },

    #[error("length mismatch: {predictions} predictions vs {references} references")]
    LengthMismatch {
        predictions: usize,
        references: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Serde(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EcoError>,
    },
}

impl EcoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EcoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        EcoError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        EcoError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
