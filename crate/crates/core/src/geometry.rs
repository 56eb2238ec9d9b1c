//! Pinhole + Brown distortion imaging chain for a rotation-only camera.
//!
//! World point `X` goes through: rigid transform `X' = R (X - C)`, perspective
//! divide `x' = X'/Z'`, radial/tangential distortion `x'' = D(x')`, then the
//! intrinsic matrix `x = K x''` with square pixels, zero skew and the principal
//! point at the image center. The inverse maps a pixel back to a unit ray in
//! the world frame.

use nalgebra::{Matrix2, Matrix2x4, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const EPS_Z: f64 = 1e-6;

/// Box constraints on `[k1, k2, p1, p2]` used by every solve.
pub const DISTORTION_BOUNDS: [(f64, f64); 4] = [(-1.0, 1.0), (-1.0, 1.0), (-0.1, 0.1), (-0.1, 0.1)];

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_STEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Distortion-free intrinsics with the principal point at the image center.
    pub fn new(f: f64, width: u32, height: u32) -> Self {
        Intrinsics {
            f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn with_distortion(mut self, d: [f64; 4]) -> Self {
        self.set_distortion(d);
        self
    }

    pub fn distortion(&self) -> [f64; 4] {
        [self.k1, self.k2, self.p1, self.p2]
    }

    pub fn set_distortion(&mut self, d: [f64; 4]) {
        self.k1 = d[0];
        self.k2 = d[1];
        self.p1 = d[2];
        self.p2 = d[3];
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inverse(&self) -> Matrix3<f64> {
        let inv = 1.0 / self.f;
        Matrix3::new(inv, 0.0, -self.cx * inv, 0.0, inv, -self.cy * inv, 0.0, 0.0, 1.0)
    }

    /// Largest image dimension, used by the focal-length heuristics.
    pub fn max_dim(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::InvalidInput(format!("focal length must be positive, got {}", self.f)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if self.cx != self.width as f64 / 2.0 || self.cy != self.height as f64 / 2.0 {
            return Err(Error::InvalidInput("principal point must be the image center".into()));
        }
        for (v, (lo, hi)) in self.distortion().iter().zip(DISTORTION_BOUNDS) {
            if !v.is_finite() || *v < lo || *v > hi {
                return Err(Error::InvalidInput(format!(
                    "distortion coefficient {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Normalized radius beyond which the radial polynomial folds back
    /// (`d/dr [r (1 + k1 r^2 + k2 r^4)] = 0`); infinite when it never does.
    pub fn distortion_valid_radius(&self) -> f64 {
        // 5 k2 u^2 + 3 k1 u + 1 = 0 with u = r^2
        let (a, b) = (5.0 * self.k2, 3.0 * self.k1);
        let mut best = f64::INFINITY;
        if a.abs() < 1e-15 {
            if b < 0.0 {
                best = -1.0 / b;
            }
        } else {
            let disc = b * b - 4.0 * a;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for u in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if u > 0.0 && u < best {
                        best = u;
                    }
                }
            }
        }
        best.sqrt()
    }

    /// Maps a normalized distorted point to pixels.
    pub fn to_pixel(&self, xd: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.f * xd.x + self.cx, self.f * xd.y + self.cy)
    }

    pub fn to_normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.f, (px.y - self.cy) / self.f)
    }
}

/// Orientation and projection center of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLocal {
    /// World-to-camera rotation.
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
}

impl PoseLocal {
    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        PoseLocal { rotation, center: Vector3::zeros() }
    }
}

impl Default for PoseLocal {
    fn default() -> Self {
        Self::from_rotation(UnitQuaternion::identity())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub intrinsics: Intrinsics,
    pub pose: PoseLocal,
}

impl ViewParams {
    pub fn new(intrinsics: Intrinsics, rotation: UnitQuaternion<f64>) -> Self {
        ViewParams { intrinsics, pose: PoseLocal::from_rotation(rotation) }
    }

    /// Projects a world direction when it lands inside the image and inside
    /// the monotone region of the distortion polynomial.
    pub fn visible_direction(&self, dir: &Vector3<f64>) -> Option<Vector2<f64>> {
        let xc = self.pose.rotation * dir;
        if xc.z <= EPS_Z * xc.norm() {
            return None;
        }
        let xn = Vector2::new(xc.x / xc.z, xc.y / xc.z);
        if xn.norm() >= self.intrinsics.distortion_valid_radius() {
            return None;
        }
        let px = self.intrinsics.to_pixel(&distort(&xn, &self.intrinsics));
        self.intrinsics.contains(&px).then_some(px)
    }
}

/// Unit direction from the projection center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayLandmark {
    pub dir: Vector3<f64>,
}

impl RayLandmark {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::Degenerate("zero-length ray".into()));
        }
        Ok(RayLandmark { dir: v / n })
    }
}

/// SE(3) map `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        RigidTransform { rotation: r, translation: -(r * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Brown distortion of a normalized point.
pub fn distort(xn: &Vector2<f64>, intr: &Intrinsics) -> Vector2<f64> {
    let (x, y) = (xn.x, xn.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2;
    Vector2::new(
        x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x),
        y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y,
    )
}

/// Jacobians of [`distort`] with respect to the point and to `[k1, k2, p1, p2]`.
pub fn distort_jacobian(xn: &Vector2<f64>, intr: &Intrinsics) -> (Matrix2<f64>, Matrix2x4<f64>) {
    let (x, y) = (xn.x, xn.y);
    let (k1, k2, p1, p2) = (intr.k1, intr.k2, intr.p1, intr.p2);
    let r2 = x * x + y * y;
    let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
    // d radial / d(x, y) = (2 k1 + 4 k2 r2) * (x, y)
    let dr = 2.0 * k1 + 4.0 * k2 * r2;
    let d_point = Matrix2::new(
        radial + x * dr * x + 2.0 * p1 * y + 6.0 * p2 * x,
        x * dr * y + 2.0 * p1 * x + 2.0 * p2 * y,
        y * dr * x + 2.0 * p1 * x + 2.0 * p2 * y,
        radial + y * dr * y + 6.0 * p1 * y + 2.0 * p2 * x,
    );
    let d_coeffs = Matrix2x4::new(
        x * r2,
        x * r2 * r2,
        2.0 * x * y,
        r2 + 2.0 * x * x,
        y * r2,
        y * r2 * r2,
        r2 + 2.0 * y * y,
        2.0 * x * y,
    );
    (d_point, d_coeffs)
}

/// Numerically inverts [`distort`] with damped Newton iterations. Points
/// whose only preimages lie beyond the fold of the radial polynomial are
/// rejected.
pub fn undistort(xd: &Vector2<f64>, intr: &Intrinsics) -> Result<Vector2<f64>> {
    if !(xd.x.is_finite() && xd.y.is_finite()) {
        return Err(Error::InvalidInput("non-finite normalized point".into()));
    }
    let x = newton_undistort(xd, intr)?;
    if x.norm() > intr.distortion_valid_radius() * (1.0 + 1e-9) {
        return Err(Error::UndistortNoConvergence(UNDISTORT_MAX_ITERS));
    }
    Ok(x)
}

fn newton_undistort(xd: &Vector2<f64>, intr: &Intrinsics) -> Result<Vector2<f64>> {
    let mut x = *xd;
    let mut res = distort(&x, intr) - xd;
    for _ in 0..UNDISTORT_MAX_ITERS {
        if res.norm() == 0.0 {
            return Ok(x);
        }
        let (j, _) = distort_jacobian(&x, intr);
        let Some(jinv) = j.try_inverse() else {
            break;
        };
        let mut step = jinv * res;
        // backtrack if the full Newton step makes things worse
        let mut accepted = false;
        for _ in 0..30 {
            let cand = x - step;
            let cand_res = distort(&cand, intr) - xd;
            if cand_res.norm() < res.norm() || step.norm() <= UNDISTORT_STEP_TOL {
                x = cand;
                res = cand_res;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if step.norm() < UNDISTORT_STEP_TOL {
            return Ok(x);
        }
    }
    if res.norm() < 1e-14 {
        return Ok(x);
    }
    Err(Error::UndistortNoConvergence(UNDISTORT_MAX_ITERS))
}

fn project_camera_frame(view: &ViewParams, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(xc.x.is_finite() && xc.y.is_finite() && xc.z.is_finite()) {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    if xc.z <= EPS_Z {
        return Err(Error::BehindCamera);
    }
    let xn = Vector2::new(xc.x / xc.z, xc.y / xc.z);
    Ok(view.intrinsics.to_pixel(&distort(&xn, &view.intrinsics)))
}

/// Projects a world point to pixels.
pub fn project_point(view: &ViewParams, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    let xc = view.pose.rotation * (point - view.pose.center);
    project_camera_frame(view, &xc)
}

/// Projects a ray landmark (the point `C + r`).
pub fn project_ray(view: &ViewParams, ray: &RayLandmark) -> Result<Vector2<f64>> {
    let xc = view.pose.rotation * ray.dir;
    project_camera_frame(view, &xc)
}

/// Back-projects a pixel to a unit ray in the world frame.
pub fn pixel_to_ray(view: &ViewParams, px: &Vector2<f64>) -> Result<RayLandmark> {
    if !(px.x.is_finite() && px.y.is_finite()) {
        return Err(Error::InvalidInput("non-finite pixel".into()));
    }
    let xd = view.intrinsics.to_normalized(px);
    let xu = undistort(&xd, &view.intrinsics)?;
    let cam = Vector3::new(xu.x, xu.y, 1.0);
    RayLandmark::new(view.pose.rotation.inverse() * cam)
}

/// Closest rotation in Frobenius norm, via SVD with determinant correction.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Rotation3<f64>> {
    let svd = m.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::Degenerate("SVD failed".into()));
    };
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(Rotation3::from_matrix_unchecked(u * d * vt))
}

/// Relative rotation `R_ij = K_i^-1 H_ij K_j` projected onto SO(3), where
/// `H_ij` maps pixels of view `j` into view `i`.
pub fn rotation_from_homography(
    k_i: &Intrinsics,
    h_ij: &Matrix3<f64>,
    k_j: &Intrinsics,
) -> Result<UnitQuaternion<f64>> {
    if h_ij.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite homography".into()));
    }
    let mut m = k_i.k_inverse() * h_ij * k_j.k_matrix();
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(Error::Degenerate("rank-deficient homography".into()));
    }
    // H is defined up to a (possibly negative) scale
    if m.determinant() < 0.0 {
        m = -m;
    }
    let r = nearest_rotation(&m)?;
    Ok(UnitQuaternion::from_rotation_matrix(&r))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    (a * b.inverse()).angle()
}
