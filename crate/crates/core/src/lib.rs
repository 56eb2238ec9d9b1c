//! Calibration engine for rotation-only (pan-tilt-zoom) cameras.
//!
//! A PTZ camera rotates about its projection center, so every view shares one
//! center and the scene is represented by unit ray landmarks instead of 3D
//! points. The crate covers the whole workflow:
//!
//! * [`correspondence`]: pairwise match ingestion, RANSAC homography
//!   verification and union-find track building.
//! * [`iba`]: incremental bundle adjustment over ray landmarks that recovers
//!   per-view focal length, Brown distortion and orientation.
//! * [`georef`]: alignment to a metric world frame from sparse 2D-3D
//!   annotations with a joint refinement.
//! * [`online`]: relocalization of new viewpoints against the calibrated
//!   reference views.
//! * [`synth`] and [`eval`]: synthetic scenes with ground truth and the
//!   accuracy metrics used to score a calibration.
//!
//! All optimisation runs through the Levenberg-Marquardt engine in
//! [`solver`]. Data-parallel loops go through [`par`], which falls back to
//! sequential iteration when the `parallel` feature is disabled.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correspondence;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod georef;
pub mod iba;
pub mod io;
pub mod online;
pub mod par;
pub mod pipeline;
pub mod pnp;
pub mod polygon;
pub mod residuals;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, PoseLocal, RayLandmark, RigidTransform, ViewParams};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Identifier of a camera view.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewId(pub String);

impl ViewId {
    pub fn new(id: impl Into<String>) -> Self {
        ViewId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ViewId {
    fn from(s: &str) -> Self {
        ViewId(s.to_owned())
    }
}

/// Identifier of a feature track (and of the ray landmark built from it).
pub type TrackId = usize;
