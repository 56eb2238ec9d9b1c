use thiserror::Error;

use crate::ViewId;

/// Errors raised across the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("undistortion did not converge after {0} iterations")]
    UndistortNoConvergence(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("unknown view {0}")]
    UnknownView(ViewId),
    #[error("registration of view {view} failed: {reason}")]
    Registration { view: ViewId, reason: String },
    #[error("reconstruction failed: {0}")]
    Reconstruction(String),
    #[error("georeferencing failed: {0}")]
    Georef(String),
    #[error("localization failed: {0}")]
    Localization(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the algorithm itself, as opposed to bad input or IO.
    pub fn is_algorithmic(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::Registration { .. }
                | Error::Reconstruction(_)
                | Error::Georef(_)
                | Error::Localization(_)
                | Error::UndistortNoConvergence(_)
                | Error::BehindCamera
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
