use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category sets differ between domains: source has {source_only:?} not in target, target has {target_only:?} not in source")]
    CategoryMismatch {
        source_only: Vec<String>,
        target_only: Vec<String>,
    },

    #[error("cannot decode image {path}: {reason}")]
    SampleDecodeError { path: PathBuf, reason: String },

    #[error("the {0} domain has no samples")]
    EmptyDomain(&'static str),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDiverged { step: usize },

    #[error("backbone shape error: {0}")]
    BackboneShapeError(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("prototype assignment error: {0}")]
    AssignmentError(String),

    #[error("category {0} has no source samples to project onto")]
    EmptyClassError(usize),

    #[error("no cached pseudo-label for {domain} sample {index}")]
    CacheMiss { domain: &'static str, index: usize },

    #[error("index {index} out of range (len {len})")]
    IndexError { index: usize, len: usize },

    #[error("missing artifact: expected {0}")]
    MissingArtifact(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
