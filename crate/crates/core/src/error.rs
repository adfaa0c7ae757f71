//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("teacher list is empty")]
    EmptyTeachers,
    #[error("perturbation level list is empty")]
    EmptyLevels,
    #[error("perturbation levels must be strictly increasing: {0:?}")]
    NonMonotoneLevels(Vec<f64>),
    #[error("covariance condition number exceeds 1e12 (log-scale spread {0:.3})")]
    SingularCovariance(f64),
    #[error("forward output is stale: cloud generation {cloud} != render generation {render}")]
    StaleForward { cloud: u64, render: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small for an 11x11 window: {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("depth map is constant over the valid set (zero variance)")]
    DegenerateDepth,
    #[error("teacher mask marks no background pixels")]
    EmptyBackground,
    #[error("unknown student id {0}")]
    UnknownStudent(usize),
    #[error("curriculum is inactive at iteration {0}")]
    InactiveCurriculum(u64),
    #[error("schedule produced sigma {sigma} but no configured level matches")]
    MissingLevel { sigma: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("image codec error: {0}")]
    ImageCodec(#[from] image::ImageError),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
