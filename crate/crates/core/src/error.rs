use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ply header: {0}")]
    PlyHeader(String),
    #[error("ply vertex {vertex}, property `{property}`: {reason}")]
    PlyVertex {
        vertex: usize,
        property: String,
        reason: String,
    },
    #[error("missing required ply property `{0}`")]
    PlyMissingProperty(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("feature file at byte {offset}: {reason}")]
    FeatureFile { offset: usize, reason: String },
    #[error("binary format at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("satellite-free violation: {0}")]
    SatelliteFreeViolation(String),
    #[error("vocabulary digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("degenerate descriptor: {0}")]
    DegenerateDescriptor(&'static str),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing ground truth for query `{0}`")]
    MissingGroundTruth(String),
    #[error("completion job rejected: {0}")]
    JobRejected(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
