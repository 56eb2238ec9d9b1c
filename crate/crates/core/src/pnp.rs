//! Absolute pose of a calibrated camera from 2D-3D correspondences.
//!
//! Candidates come from a linear DLT (six or more points) and from Grunert's
//! three-point solution over a fixed set of triples. The best candidate by
//! reprojection error is polished with Levenberg-Marquardt.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, UnitQuaternion, Vector2, Vector3};

use crate::geometry::{nearest_rotation, undistort, Intrinsics};
use crate::residuals::PoseReprojection;
use crate::solver::{self, quat_from_slice, quat_to_array, Loss, Manifold, Problem, SolverOptions, Termination};
use crate::{Error, Result};

/// World-frame camera pose: `X_c = R (X - C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPose {
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
}

impl WorldPose {
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.center)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PnpSolution {
    pub pose: WorldPose,
    /// Root-mean-square reprojection error in pixels.
    pub rms_px: f64,
}

/// Largest number of point triples tried by the minimal solver.
const MAX_TRIPLES: usize = 24;

/// Solves for the world pose of a camera with known intrinsics.
pub fn solve_pnp(intr: &Intrinsics, world: &[Vector3<f64>], pixels: &[Vector2<f64>]) -> Result<PnpSolution> {
    if world.len() != pixels.len() {
        return Err(Error::InvalidInput("world and pixel counts differ".into()));
    }
    if world.len() < 4 {
        return Err(Error::Degenerate(format!("pose needs four points, got {}", world.len())));
    }
    let bearings = pixels
        .iter()
        .map(|px| undistort(&intr.to_normalized(px), intr).map(|n| Vector3::new(n.x, n.y, 1.0).normalize()))
        .collect::<Result<Vec<_>>>()?;
    check_degeneracy(world, &bearings)?;

    let mut candidates = Vec::new();
    if world.len() >= 6 {
        if let Some(p) = dlt_pose(world, &bearings) {
            candidates.push(p);
        }
    }
    for [i, j, k] in triples(world.len()) {
        candidates.extend(p3p(
            [&world[i], &world[j], &world[k]],
            [&bearings[i], &bearings[j], &bearings[k]],
        ));
    }
    let scored: Vec<(f64, WorldPose)> = candidates
        .into_iter()
        .filter_map(|p| sum_squared_error(intr, &p, world, pixels).map(|e| (e, p)))
        .collect();
    let best = scored
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::Degenerate("no pose candidate places every point in front".into()))?;
    let pose = polish(intr, best, world, pixels)?;
    let sse = sum_squared_error(intr, &pose, world, pixels)
        .ok_or_else(|| Error::Degenerate("polished pose puts points behind the camera".into()))?;
    Ok(PnpSolution { pose, rms_px: (sse / world.len() as f64).sqrt() })
}

fn check_degeneracy(world: &[Vector3<f64>], bearings: &[Vector3<f64>]) -> Result<()> {
    let b = DMatrix::from_fn(3, bearings.len(), |r, c| bearings[c][r]);
    let sv = b.singular_values();
    if sv[2] < 1e-6 * sv[0] {
        return Err(Error::Degenerate("image points are collinear or share one ray".into()));
    }
    let mean = world.iter().sum::<Vector3<f64>>() / world.len() as f64;
    let spread = DMatrix::from_fn(3, world.len(), |r, c| world[c][r] - mean[r]);
    let sv = spread.singular_values();
    if sv[1] < 1e-9 * sv[0].max(1e-300) {
        return Err(Error::Degenerate("world points are collinear".into()));
    }
    Ok(())
}

/// Deterministic, well-spread triples of point indices.
fn triples(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for s in 0..n {
        let t = [s, (s + n / 3) % n, (s + 2 * n / 3) % n];
        if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && !out.contains(&t) {
            out.push(t);
        }
        if out.len() == MAX_TRIPLES {
            break;
        }
    }
    if out.is_empty() {
        out.push([0, 1, 2]);
    }
    out
}

fn sum_squared_error(intr: &Intrinsics, pose: &WorldPose, world: &[Vector3<f64>], pixels: &[Vector2<f64>]) -> Option<f64> {
    let mut r = [0.0; 2];
    let q = quat_to_array(&pose.rotation);
    let c = [pose.center.x, pose.center.y, pose.center.z];
    let mut sum = 0.0;
    for (x, px) in world.iter().zip(pixels) {
        let cost = PoseReprojection { observed: *px, world: *x, intrinsics: *intr };
        if !solver::CostFunction::evaluate(&cost, &[&q, &c], &mut r, None) {
            return None;
        }
        sum += r[0] * r[0] + r[1] * r[1];
    }
    sum.is_finite().then_some(sum)
}

/// Linear pose from the projection matrix on normalized bearings.
fn dlt_pose(world: &[Vector3<f64>], bearings: &[Vector3<f64>]) -> Option<WorldPose> {
    let n = world.len();
    let mean = world.iter().sum::<Vector3<f64>>() / n as f64;
    let rms = (world.iter().map(|x| (x - mean).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) {
        return None;
    }
    let s = 3f64.sqrt() / rms;
    let rows = (2 * n).max(12);
    let mut a = DMatrix::zeros(rows, 12);
    for (k, (x, b)) in world.iter().zip(bearings).enumerate() {
        let xn = (x - mean) * s;
        let xh = [xn.x, xn.y, xn.z, 1.0];
        let (u, v) = (b.x / b.z, b.y / b.z);
        for c in 0..4 {
            a[(2 * k, c)] = xh[c];
            a[(2 * k, 8 + c)] = -u * xh[c];
            a[(2 * k + 1, 4 + c)] = xh[c];
            a[(2 * k + 1, 8 + c)] = -v * xh[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (min_idx, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let p = vt.row(min_idx);
    let p_norm = Matrix3x4::from_fn(|r, c| p[4 * r + c]);
    // undo the world normalization: X_n = s (X - mean)
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    for r in 0..3 {
        t[(r, 3)] = -s * mean[r];
    }
    let proj = p_norm * t;
    let mut m: Matrix3<f64> = proj.fixed_view::<3, 3>(0, 0).into_owned();
    let mut p4: Vector3<f64> = proj.column(3).into_owned();
    let det = m.determinant();
    if det.abs() < 1e-300 {
        return None;
    }
    if det < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let center = -m.try_inverse()? * p4;
    let rot = nearest_rotation(&m).ok()?;
    Some(WorldPose { rotation: UnitQuaternion::from_rotation_matrix(&rot), center })
}

/// Grunert's three-point solution. Returns up to four poses.
pub fn p3p(world: [&Vector3<f64>; 3], bearings: [&Vector3<f64>; 3]) -> Vec<WorldPose> {
    let [p1, p2, p3] = world;
    let [j1, j2, j3] = bearings.map(|b| b.normalize());
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let (ca, cb, cg) = (j2.dot(&j3), j1.dot(&j3), j1.dot(&j2));
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;

    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let mut poses = Vec::new();
    for v in real_quartic_roots([a4, a3, a2c, a1, a0]) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let d = 1.0 + u * u - 2.0 * u * cg;
        if !(d > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (c2 / d).sqrt();
        let cam = [j1 * s1, j2 * (u * s1), j3 * (v * s1)];
        if let Some(pose) = align([*p1, *p2, *p3], cam) {
            poses.push(pose);
        }
    }
    poses
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`, refined
/// by Newton steps.
fn real_quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let eval = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let deriv = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return Vec::new();
    }
    let mut comp = Matrix4::zeros();
    for k in 0..4 {
        comp[(0, k)] = -c[k + 1] / c[0];
    }
    for k in 1..4 {
        comp[(k, k - 1)] = 1.0;
    }
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let d = deriv(x);
                if d.abs() < 1e-300 {
                    break;
                }
                x -= eval(x) / d;
            }
            x
        })
        .filter(|x| x.is_finite())
        .collect()
}

/// Rigid alignment of world points onto camera-frame points (Kabsch).
fn align(world: [Vector3<f64>; 3], cam: [Vector3<f64>; 3]) -> Option<WorldPose> {
    let mw = world.iter().sum::<Vector3<f64>>() / 3.0;
    let mc = cam.iter().sum::<Vector3<f64>>() / 3.0;
    let cov: Matrix3<f64> = world.iter().zip(&cam).map(|(w, c)| (c - mc) * (w - mw).transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rotation = UnitQuaternion::from_matrix(&r);
    // X_c = R X + t with t = mc - R mw, so C = -R^T t
    let t = mc - r * mw;
    let center = -(r.transpose() * t);
    center.iter().all(|v| v.is_finite()).then_some(WorldPose { rotation, center })
}

fn polish(intr: &Intrinsics, init: WorldPose, world: &[Vector3<f64>], pixels: &[Vector2<f64>]) -> Result<WorldPose> {
    let mut problem = Problem::new();
    let rot = problem.add_parameter_block(quat_to_array(&init.rotation).to_vec(), Manifold::Rotation);
    let center = problem.add_parameter_block(init.center.as_slice().to_vec(), Manifold::Euclidean);
    for (x, px) in world.iter().zip(pixels) {
        problem.add_residual_block(
            Box::new(PoseReprojection { observed: *px, world: *x, intrinsics: *intr }),
            Loss::Trivial,
            vec![rot, center],
        );
    }
    let opts = SolverOptions { use_schur: false, parallel: false, ..SolverOptions::default() };
    let report = solver::solve(&mut problem, &opts);
    if report.termination == Termination::Failure {
        return Ok(init);
    }
    let c = problem.values(center);
    Ok(WorldPose { rotation: quat_from_slice(problem.values(rot)), center: Vector3::new(c[0], c[1], c[2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, rotation_angle_between, PoseLocal, ViewParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> (Intrinsics, WorldPose, Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let intr = Intrinsics::new(1400.0, 1920, 1080).with_distortion([-0.05, 0.01, 0.001, -0.0005]);
        let rotation = UnitQuaternion::from_euler_angles(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.0..3.0),
        );
        let center = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(0.0..20.0));
        let pose = WorldPose { rotation, center };
        let view = ViewParams { intrinsics: intr, pose: PoseLocal::default() };
        let (mut world, mut pixels) = (Vec::new(), Vec::new());
        while world.len() < n {
            let px = Vector2::new(rng.random_range(50.0..1870.0), rng.random_range(50.0..1030.0));
            let ray = crate::geometry::pixel_to_ray(&view, &px).unwrap().dir;
            let depth = rng.random_range(10.0..150.0);
            let xc = ray * depth;
            let x = rotation.inverse() * xc + center;
            let p = project_point(&ViewParams { intrinsics: intr, pose: PoseLocal::default() }, &xc).unwrap();
            world.push(x);
            pixels.push(p);
        }
        (intr, pose, world, pixels)
    }

    #[test]
    fn quartic_roots_match_factors() {
        // (x-1)(x+2)(x-3)(x^2 ... ) -> use (x-1)(x+2)(x-3)(x-0.5)
        let roots = [1.0, -2.0, 3.0, 0.5];
        let mut c = vec![1.0];
        for r in roots {
            let mut next = vec![0.0; c.len() + 1];
            for (i, v) in c.iter().enumerate() {
                next[i] += v;
                next[i + 1] -= v * r;
            }
            c = next;
        }
        let mut found = real_quartic_roots([c[0], c[1], c[2], c[3], c[4]]);
        found.sort_by(f64::total_cmp);
        let mut want = roots.to_vec();
        want.sort_by(f64::total_cmp);
        for (a, b) in found.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{found:?}");
        }
        assert_eq!(found.len(), 4);
    }

    #[test]
    fn p3p_contains_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (intr, truth, world, pixels) = scene(&mut rng, 3);
            let b: Vec<Vector3<f64>> = pixels
                .iter()
                .map(|p| {
                    let n = undistort(&intr.to_normalized(p), &intr).unwrap();
                    Vector3::new(n.x, n.y, 1.0)
                })
                .collect();
            let poses = p3p([&world[0], &world[1], &world[2]], [&b[0], &b[1], &b[2]]);
            let best = poses
                .iter()
                .map(|p| rotation_angle_between(&p.rotation, &truth.rotation) + (p.center - truth.center).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best} of {} candidates", poses.len());
        }
    }

    #[test]
    fn dlt_recovers_noise_free_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (_, truth, world, pixels) = scene(&mut rng, 12);
            let view = ViewParams {
                intrinsics: Intrinsics::new(1400.0, 1920, 1080).with_distortion([-0.05, 0.01, 0.001, -0.0005]),
                pose: PoseLocal::default(),
            };
            let b: Vec<Vector3<f64>> =
                pixels.iter().map(|p| crate::geometry::pixel_to_ray(&view, p).unwrap().dir).collect();
            let p = dlt_pose(&world, &b).unwrap();
            assert!(rotation_angle_between(&p.rotation, &truth.rotation) < 1e-8);
            assert!((p.center - truth.center).norm() < 1e-6);
        }
    }

    #[test]
    fn solve_pnp_with_four_and_many_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [4, 5, 6, 30] {
            let (intr, truth, world, pixels) = scene(&mut rng, n);
            let sol = solve_pnp(&intr, &world, &pixels).unwrap();
            assert!(sol.rms_px < 1e-6, "n={n} rms {}", sol.rms_px);
            assert!(rotation_angle_between(&sol.pose.rotation, &truth.rotation) < 1e-7, "n={n}");
            assert!((sol.pose.center - truth.center).norm() < 1e-5, "n={n}");
        }
    }

    #[test]
    fn degenerate_inputs_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (intr, truth, world, pixels) = scene(&mut rng, 8);
        assert!(solve_pnp(&intr, &world[..3], &pixels[..3]).is_err());
        // every point on one ray through the camera center
        let dir = (world[0] - truth.center).normalize();
        let on_ray: Vec<Vector3<f64>> = (1..7).map(|k| truth.center + dir * (10.0 * k as f64)).collect();
        let px = vec![pixels[0]; on_ray.len()];
        assert!(matches!(solve_pnp(&intr, &on_ray, &px), Err(Error::Degenerate(_))));
    }
}
