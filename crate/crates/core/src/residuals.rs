//! Reprojection residuals with analytic Jacobians.
//!
//! Parameter blocks follow a fixed layout shared by the reconstruction code:
//! a view is `[rotation (quaternion), focal (1), distortion (4)]`, a ray
//! landmark is a unit 3-vector, and the geographic transform is
//! `[rotation (quaternion), translation (3)]`. Rotations use the left
//! tangent update of [`Manifold::Rotation`](crate::solver::Manifold).

use nalgebra::{DMatrix, Matrix2x3, Matrix2x4, Matrix3, Vector2, Vector3};

use crate::geometry::{distort, distort_jacobian, skew, Intrinsics, EPS_Z};
use crate::solver::{quat_from_slice, sphere_basis, CostFunction};

/// Pixel projection of a camera-frame point and its derivatives.
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub d_point: Matrix2x3<f64>,
    pub d_focal: Vector2<f64>,
    pub d_distortion: Matrix2x4<f64>,
}

/// Projects a camera-frame point with intrinsics `f` and `dist`, principal
/// point `(cx, cy)`. `None` when the point is not in front of the camera.
pub fn project_with_jacobian(xc: &Vector3<f64>, f: f64, dist: &[f64], cx: f64, cy: f64) -> Option<Projection> {
    if !(xc.z > EPS_Z) {
        return None;
    }
    let mut intr = Intrinsics::new(f, 2, 2);
    intr.set_distortion([dist[0], dist[1], dist[2], dist[3]]);
    let iz = 1.0 / xc.z;
    let xn = Vector2::new(xc.x * iz, xc.y * iz);
    let xd = distort(&xn, &intr);
    let (dp, dk) = distort_jacobian(&xn, &intr);
    let persp = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz);
    Some(Projection {
        pixel: Vector2::new(f * xd.x + cx, f * xd.y + cy),
        d_point: dp * persp * f,
        d_focal: xd,
        d_distortion: dk * f,
    })
}

fn write_block<const C: usize>(dst: &mut DMatrix<f64>, src: &nalgebra::SMatrix<f64, 2, C>) {
    dst.copy_from(src);
}

fn write_view_jacobians(jac: &mut [DMatrix<f64>], p: &Projection, xc: &Vector3<f64>) {
    // left rotation perturbation: d(exp(w) x)/dw = -[x]_x
    write_block(&mut jac[0], &(p.d_point * -skew(xc)));
    jac[1].copy_from(&p.d_focal);
    write_block(&mut jac[2], &p.d_distortion);
}

fn vec3(s: &[f64]) -> Vector3<f64> {
    Vector3::new(s[0], s[1], s[2])
}

/// Observation of a ray landmark in one view.
///
/// Parameters: `[rotation, focal, distortion, ray]`.
#[derive(Debug, Clone, Copy)]
pub struct RayReprojection {
    pub observed: Vector2<f64>,
    pub cx: f64,
    pub cy: f64,
}

impl CostFunction for RayReprojection {
    fn num_residuals(&self) -> usize {
        2
    }

    fn local_dims(&self) -> Vec<usize> {
        vec![3, 1, 4, 2]
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let rot = quat_from_slice(params[0]);
        let ray = vec3(params[3]);
        let xc = rot * ray;
        let Some(p) = project_with_jacobian(&xc, params[1][0], params[2], self.cx, self.cy) else {
            return false;
        };
        residuals[0] = p.pixel.x - self.observed.x;
        residuals[1] = p.pixel.y - self.observed.y;
        if let Some(jac) = jacobians {
            write_view_jacobians(jac, &p, &xc);
            let (b1, b2) = sphere_basis(&ray);
            let r = rot.to_rotation_matrix();
            let basis = nalgebra::Matrix3x2::from_columns(&[r * b1, r * b2]);
            jac[3].copy_from(&(p.d_point * basis));
        }
        true
    }
}

/// Annotated world point seen in one view, through the world-to-local
/// transform `X_local = R_T X + t`.
///
/// Parameters: `[rotation, focal, distortion, transform rotation, transform translation]`.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationReprojection {
    pub observed: Vector2<f64>,
    pub world: Vector3<f64>,
    pub cx: f64,
    pub cy: f64,
}

impl CostFunction for AnnotationReprojection {
    fn num_residuals(&self) -> usize {
        2
    }

    fn local_dims(&self) -> Vec<usize> {
        vec![3, 1, 4, 3, 3]
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let rot = quat_from_slice(params[0]);
        let rot_t = quat_from_slice(params[3]);
        let rotated = rot_t * self.world;
        let local = rotated + vec3(params[4]);
        let xc = rot * local;
        let Some(p) = project_with_jacobian(&xc, params[1][0], params[2], self.cx, self.cy) else {
            return false;
        };
        residuals[0] = p.pixel.x - self.observed.x;
        residuals[1] = p.pixel.y - self.observed.y;
        if let Some(jac) = jacobians {
            write_view_jacobians(jac, &p, &xc);
            let r: Matrix3<f64> = *rot.to_rotation_matrix().matrix();
            write_block(&mut jac[3], &(p.d_point * r * -skew(&rotated)));
            write_block(&mut jac[4], &(p.d_point * r));
        }
        true
    }
}

/// World point observed by a camera with known intrinsics; used to polish
/// a world pose. Parameters: `[rotation, center]`, `X_c = R (X - C)`.
#[derive(Debug, Clone, Copy)]
pub struct PoseReprojection {
    pub observed: Vector2<f64>,
    pub world: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl CostFunction for PoseReprojection {
    fn num_residuals(&self) -> usize {
        2
    }

    fn local_dims(&self) -> Vec<usize> {
        vec![3, 3]
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let rot = quat_from_slice(params[0]);
        let xc = rot * (self.world - vec3(params[1]));
        let intr = &self.intrinsics;
        let Some(p) = project_with_jacobian(&xc, intr.f, &intr.distortion(), intr.cx, intr.cy) else {
            return false;
        };
        residuals[0] = p.pixel.x - self.observed.x;
        residuals[1] = p.pixel.y - self.observed.y;
        if let Some(jac) = jacobians {
            write_block(&mut jac[0], &(p.d_point * -skew(&xc)));
            let r: Matrix3<f64> = *rot.to_rotation_matrix().matrix();
            write_block(&mut jac[1], &(p.d_point * -r));
        }
        true
    }
}
