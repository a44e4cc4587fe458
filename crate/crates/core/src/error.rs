use std::path::PathBuf;

use crate::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("manifest {path}, row {row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("decode {uri}: {message}")]
    Decode { uri: String, message: String },

    #[error("frame directory {uri} is missing frame indices {missing:?}")]
    MissingFrames { uri: String, missing: Vec<u64> },

    #[error("no frames decoded from {uri}")]
    NoFrames { uri: String },

    #[error("feature cache {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("expected {expected} features but cache holds {found}")]
    ModalityMismatch { expected: Modality, found: Modality },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("video {video_id}: {message}")]
    Extractor { video_id: String, message: String },

    #[error("missing {0} token block")]
    MissingModality(Modality),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("video id sets differ; only in predictions: {only_predictions:?}, only in manifest: {only_manifest:?}")]
    IdMismatch {
        only_predictions: Vec<String>,
        only_manifest: Vec<String>,
    },

    #[error("video {video_id}: missing feature cache {path}")]
    MissingCache { video_id: String, path: PathBuf },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
