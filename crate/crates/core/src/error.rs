use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("unknown object id `{0}`")]
    UnknownObject(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("no observations to fit")]
    NoObservations,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("cannot build question: {0}")]
    Selection(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("log append refused: {0}")]
    LogAppend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
