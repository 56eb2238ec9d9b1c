//! JSON file helpers.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, PoseLocal, RigidTransform, ViewParams};
use crate::{Error, Result, ViewId};

/// Writes pretty-printed JSON, creating parent directories as needed.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// records shared by every file format

/// One camera's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: ViewId,
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
    /// `[w, x, y, z]`, world to camera.
    pub quaternion: [f64; 4],
    pub center: [f64; 3],
}

pub(crate) fn quat_from_array(q: &[f64; 4]) -> Result<UnitQuaternion<f64>> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = raw.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::Parse(format!("invalid quaternion {q:?}")));
    }
    // keep stored unit quaternions bit-exact
    if (n - 1.0).abs() < 1e-12 {
        return Ok(UnitQuaternion::new_unchecked(raw));
    }
    Ok(UnitQuaternion::from_quaternion(raw))
}

impl CameraRecord {
    pub fn new(view_id: ViewId, view: &ViewParams) -> Self {
        let i = &view.intrinsics;
        let q = view.pose.rotation;
        let c = view.pose.center;
        CameraRecord {
            view_id,
            f: i.f,
            cx: i.cx,
            cy: i.cy,
            k1: i.k1,
            k2: i.k2,
            p1: i.p1,
            p2: i.p2,
            width: i.width,
            height: i.height,
            quaternion: [q.w, q.i, q.j, q.k],
            center: [c.x, c.y, c.z],
        }
    }

    pub fn to_view(&self) -> Result<ViewParams> {
        let intrinsics = Intrinsics {
            f: self.f,
            cx: self.cx,
            cy: self.cy,
            k1: self.k1,
            k2: self.k2,
            p1: self.p1,
            p2: self.p2,
            width: self.width,
            height: self.height,
        };
        intrinsics.validate().map_err(|e| Error::Parse(format!("camera {}: {e}", self.view_id)))?;
        let pose = PoseLocal { rotation: quat_from_array(&self.quaternion)?, center: Vector3::from(self.center) };
        Ok(ViewParams { intrinsics, pose })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        let q = t.rotation;
        TransformRecord { quaternion: [q.w, q.i, q.j, q.k], translation: [t.translation.x, t.translation.y, t.translation.z] }
    }
}

impl TransformRecord {
    pub fn to_transform(&self) -> Result<RigidTransform> {
        Ok(RigidTransform::new(quat_from_array(&self.quaternion)?, Vector3::from(self.translation)))
    }
}
