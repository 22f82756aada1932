use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no regions to union")]
    NoRegions,
    #[error("region degenerate: child size {width}x{height}")]
    DegenerateRegion { width: u32, height: u32 },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("empty crop")]
    EmptyCrop,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model load failed: {0}")]
    ModelLoad(String),
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("classifier failure: {0}")]
    Classifier(String),
    #[error("classify failed for image {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("incomplete annotation: {0}")]
    IncompleteAnnotation(String),
    #[error("export failed for {path}: {message}")]
    Export { path: PathBuf, message: String },
    #[error("image read failed for {path}: {message}")]
    ImageRead { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
