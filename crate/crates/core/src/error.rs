use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty library: no feature passed the vocabulary filter")]
    EmptyLibrary,
    #[error("descriptor dimension mismatch in image {image_id}: expected {expected}, found {found}")]
    DimensionMismatch {
        image_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("k = {k} exceeds the {available} library features available after exclusion")]
    KTooLarge { k: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error("{context}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        context: String,
        offset: u64,
        needed: u64,
    },
    #[error("{context}: record {record}: {message}")]
    InvalidRecord {
        context: String,
        record: u64,
        message: String,
    },
    #[error("library fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("duplicate image id {id} in collection {collection}")]
    DuplicateId { collection: String, id: u64 },
    #[error("unknown season token {0:?}")]
    UnknownSeason(String),
    #[error("query {query_id} has an empty relevance set")]
    EmptyRelevance { query_id: u64 },
    #[error("vocabulary size {words} exceeds library size {library}")]
    VocabularyTooLarge { words: usize, library: usize },
    #[error("unknown image id {0}")]
    UnknownImage(u64),
}

impl Error {
    /// Short stable token naming the error class, used in machine-readable
    /// error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyLibrary => "empty-library",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::KTooLarge { .. } => "k-too-large",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::InvalidRecord { .. } => "invalid-record",
            Error::FingerprintMismatch { .. } => "fingerprint-mismatch",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Manifest { .. } => "manifest",
            Error::DuplicateId { .. } => "duplicate-id",
            Error::UnknownSeason(_) => "unknown-season",
            Error::EmptyRelevance { .. } => "empty-relevance",
            Error::VocabularyTooLarge { .. } => "vocabulary-too-large",
            Error::UnknownImage(_) => "unknown-image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
