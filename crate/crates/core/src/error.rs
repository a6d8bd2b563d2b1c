use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The point lies at or behind the camera's image plane.
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },

    #[error("distortion inversion did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("camera `{0}` has no calibrated pose")]
    UncalibratedCamera(String),

    #[error("calibration diverged after {iterations} iterations (loss {loss})")]
    Diverged {
        iterations: usize,
        loss: f64,
        /// Parameter vectors of the last accepted steps, oldest first.
        trace: Vec<Vec<f64>>,
    },

    #[error("{}: {error}", path.display())]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, error: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
