//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },

    #[error("line {line}: duplicate sample for cell {cell} at week {week}")]
    DuplicateWeek { line: u64, cell: String, week: u32 },

    #[error("line {line}: unknown POI label {label:?} and the catch-all fallback is disabled")]
    UnknownPoi { line: u64, label: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("POI label list is empty")]
    EmptyLabels,

    #[error("no profiles to cluster")]
    EmptyProfiles,

    #[error("cluster model has no assignments")]
    NoAssignments,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset too short: lookback {lookback} + horizon {horizon} exceeds train weeks {train_weeks}")]
    TooShort {
        lookback: usize,
        horizon: usize,
        train_weeks: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing model for POI {poi} cluster {cluster}")]
    MissingModel { poi: u16, cluster: usize },

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
