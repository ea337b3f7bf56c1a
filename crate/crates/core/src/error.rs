use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected 3 fields, got {found} at line {line}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        found: usize,
    },

    #[error("unknown token \"{0}\"")]
    UnknownToken(String),

    #[error("unknown split \"{0}\" (expected valid or test)")]
    UnknownSplit(String),

    #[error("{kind} id {id} out of range (size {size})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("invalid model shape: {0}")]
    Shape(String),

    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),

    #[error("non-finite gradient in {table} row {row}")]
    NonFiniteGradient { table: &'static str, row: usize },

    #[error("truth entity {0} is not among the candidates")]
    TruthNotInCandidates(usize),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("config {source_name}: {message}")]
    Config {
        source_name: String,
        message: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
