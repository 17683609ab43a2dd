use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pose estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} is behind the camera (z = {z:e})")]
    BehindCamera { index: usize, z: f64 },
    #[error("pixel ({u}, {v}) has no depth")]
    ZeroDepth { u: f64, v: f64 },
    #[error("pixel ({u}, {v}) is outside the {width}x{height} image")]
    OutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("no consensus: best hypothesis has {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("insufficient support: {0}")]
    InsufficientSupport(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular system (condition number {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("visibility mask is empty")]
    EmptyVisibility,
    #[error("object is not visible from the given pose")]
    ObjectOutOfView,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
