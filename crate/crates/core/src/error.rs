use std::path::PathBuf;

use crate::geom::RigidTransform;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {at}: {message}", path.display())]
    Parse {
        path: PathBuf,
        /// "line N" for text formats, "byte N" for binary ones.
        at: String,
        message: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient points: need {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("scan is empty after filtering")]
    EmptyScan,

    #[error("registration failed: {reason}")]
    Registration { reason: String, initial: RigidTransform },

    #[error("degenerate axis: normals do not span a plane")]
    DegenerateAxis,

    #[error("degenerate circle fit: {0}")]
    DegenerateFit(String),

    #[error("cylinder fit diverged (radius {radius} m)")]
    Divergence { radius: f64 },

    #[error("no RANSAC candidate reached {needed} inliers (best {best})")]
    FitFailure { needed: usize, best: usize },

    #[error("slice holds {got} points, need at least {needed}")]
    EmptySlice { needed: usize, got: usize },

    #[error("no observations left to report on")]
    EmptyReport,

    #[error("{count_a} {what_a} but {count_b} {what_b}")]
    CountMismatch {
        what_a: &'static str,
        count_a: usize,
        what_b: &'static str,
        count_b: usize,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            at: format!("line {line}"),
            message: message.into(),
        }
    }

    pub(crate) fn parse_binary(path: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            at: format!("byte {offset}"),
            message: message.into(),
        }
    }
}
