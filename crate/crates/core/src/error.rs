use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset {dataset}: missing file for id {id}: {path}")]
    MissingFile {
        dataset: String,
        id: String,
        path: PathBuf,
    },

    #[error("unknown record id {0}")]
    UnknownId(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("degenerate FOV: no pixel exceeds threshold {threshold}")]
    DegenerateFov { threshold: f32 },

    #[error("degenerate histogram: fewer than two distinct values")]
    DegenerateHistogram,

    #[error("undefined AUC: ground truth contains a single class")]
    UndefinedAuc,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(
        "non-finite loss {loss} at step {step} (samples seen {samples_seen}; batch {provenance})"
    )]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        samples_seen: u64,
        provenance: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tile at ({row}, {col}) of scale {scale}: {source}")]
    Tile {
        row: usize,
        col: usize,
        scale: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
