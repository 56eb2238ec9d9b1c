//! Georeferencing: a rigid transform from the world frame into the shared
//! local frame, estimated from annotated world points and refined jointly
//! with the reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_point, rotation_angle_between, RigidTransform, ViewParams};
use crate::iba::{build_ba_problem, IbaConfig, Reconstruction};
use crate::pnp::{solve_pnp, WorldPose};
use crate::residuals::AnnotationReprojection;
use crate::solver::{self, quat_from_slice, quat_to_array, Loss, Manifold, SolveReport, Termination};
use crate::{Error, Result, ViewId};

/// Pixel in a view annotated with its world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub view_id: ViewId,
    pub u: f64,
    pub v: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "Z")]
    pub z: f64,
}

impl AnnotationRecord {
    pub fn new(view_id: ViewId, pixel: Vector2<f64>, world: Vector3<f64>) -> Self {
        AnnotationRecord { view_id, u: pixel.x, v: pixel.y, x: world.x, y: world.y, z: world.z }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn world(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub annotations: Vec<AnnotationRecord>,
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.annotations.iter().enumerate() {
            if ![a.u, a.v, a.x, a.y, a.z].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("annotation {i} has a non-finite value")));
            }
        }
        Ok(())
    }

    /// Annotations grouped by view.
    pub fn by_view(&self) -> BTreeMap<&ViewId, Vec<&AnnotationRecord>> {
        let mut out: BTreeMap<&ViewId, Vec<&AnnotationRecord>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(&a.view_id).or_default().push(a);
        }
        out
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let file: AnnotationFile = crate::io::read_json(path)?;
    file.validate()?;
    Ok(file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeorefConfig {
    /// Candidates within this angle (degrees) of each other are averaged.
    pub average_within_deg: f64,
    /// Candidates further apart than this (degrees) are inconsistent.
    pub inconsistent_deg: f64,
    pub min_annotations_per_view: usize,
}

impl Default for GeorefConfig {
    fn default() -> Self {
        GeorefConfig { average_within_deg: 5.0, inconsistent_deg: 15.0, min_annotations_per_view: 4 }
    }
}

/// Reconstruction registered to the world frame.
#[derive(Debug, Clone)]
pub struct GeoReconstruction {
    pub reconstruction: Reconstruction,
    /// World to local frame.
    pub transform: RigidTransform,
    /// Indices of annotations whose final reprojection error exceeds the
    /// outlier threshold.
    pub flagged_annotations: Vec<usize>,
    pub report: SolveReport,
}

impl GeoReconstruction {
    /// Shared camera center in world coordinates.
    pub fn world_center(&self) -> Vector3<f64> {
        self.transform.inverse().translation
    }

    pub fn absolute_pose(&self, view: &ViewId) -> Result<WorldPose> {
        let params =
            self.reconstruction.views.get(view).ok_or_else(|| Error::UnknownView(view.clone()))?;
        Ok(absolute_pose(params, &self.transform))
    }
}

/// World pose of a local-frame view under `transform` (world to local).
pub fn absolute_pose(view: &ViewParams, transform: &RigidTransform) -> WorldPose {
    WorldPose {
        rotation: view.pose.rotation * transform.rotation,
        center: transform.inverse().translation,
    }
}

/// Initial world-to-local transform from per-view absolute poses.
pub fn estimate_initial_transform(
    recon: &Reconstruction,
    annotations: &AnnotationFile,
    cfg: &GeorefConfig,
) -> Result<RigidTransform> {
    let mut candidates: Vec<(ViewId, RigidTransform, WorldPose)> = Vec::new();
    for (view, anns) in annotations.by_view() {
        let Some(params) = recon.views.get(view) else {
            log::warn!("annotations on unregistered view {view} ignored");
            continue;
        };
        if anns.len() < cfg.min_annotations_per_view {
            log::warn!("view {view} has {} annotations; at least {} needed", anns.len(), cfg.min_annotations_per_view);
            continue;
        }
        let world: Vec<_> = anns.iter().map(|a| a.world()).collect();
        let pixels: Vec<_> = anns.iter().map(|a| a.pixel()).collect();
        match solve_pnp(&params.intrinsics, &world, &pixels) {
            Ok(sol) => {
                // world rotation = R_i R_T and the world center maps to the origin
                let rotation = params.pose.rotation.inverse() * sol.pose.rotation;
                let translation = -(rotation * sol.pose.center);
                candidates.push((view.clone(), RigidTransform::new(rotation, translation), sol.pose));
            }
            Err(e) => log::warn!("absolute pose for view {view} failed: {e}"),
        }
    }
    if candidates.is_empty() {
        return Err(Error::Georef("no registered view has enough annotations for an absolute pose".into()));
    }

    let limit = cfg.inconsistent_deg.to_radians();
    let mut spread = 0.0f64;
    for (i, a) in candidates.iter().enumerate() {
        for b in &candidates[i + 1..] {
            let angle = rotation_angle_between(&a.1.rotation, &b.1.rotation);
            if angle > limit {
                return Err(Error::Georef(format!(
                    "views {} and {} disagree on the frame rotation by {:.1} degrees",
                    a.0,
                    b.0,
                    angle.to_degrees()
                )));
            }
            spread = spread.max(angle);
        }
    }
    if spread <= cfg.average_within_deg.to_radians() {
        let rotation = average_rotation(candidates.iter().map(|c| &c.1.rotation));
        let center = candidates.iter().map(|c| c.2.center).sum::<Vector3<f64>>() / candidates.len() as f64;
        return Ok(RigidTransform::new(rotation, -(rotation * center)));
    }
    // otherwise keep the candidate that explains all annotations best
    candidates
        .iter()
        .map(|c| (annotation_errors(recon, annotations, &c.1).iter().map(|e| e.min(1e6).powi(2)).sum::<f64>(), &c.1))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Georef("no usable transform candidate".into()))
}

/// Chordal mean of rotations with signs aligned to the first.
fn average_rotation<'a>(rots: impl Iterator<Item = &'a UnitQuaternion<f64>>) -> UnitQuaternion<f64> {
    let mut acc = nalgebra::Vector4::zeros();
    let mut first: Option<nalgebra::Vector4<f64>> = None;
    for q in rots {
        let v = q.as_ref().coords;
        let r = *first.get_or_insert(v);
        acc += if v.dot(&r) < 0.0 { -v } else { v };
    }
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(acc))
}

/// Reprojection error of every annotation, infinite for unregistered views
/// or points behind the camera.
pub fn annotation_errors(recon: &Reconstruction, annotations: &AnnotationFile, transform: &RigidTransform) -> Vec<f64> {
    annotations
        .annotations
        .iter()
        .map(|a| {
            recon
                .views
                .get(&a.view_id)
                .and_then(|v| project_point(v, &transform.apply(&a.world())).ok())
                .map_or(f64::INFINITY, |p| (p - a.pixel()).norm())
        })
        .collect()
}

/// Joint refinement of views, landmarks and the transform. The first
/// registered view's rotation stays fixed; the transform rotation absorbs
/// the global orientation.
pub fn georef_bundle_adjust(
    mut recon: Reconstruction,
    annotations: &AnnotationFile,
    init: RigidTransform,
    cfg: &IbaConfig,
) -> Result<GeoReconstruction> {
    if recon.registered.is_empty() {
        return Err(Error::Georef("reconstruction has no registered views".into()));
    }
    let mut ba = build_ba_problem(&recon, cfg);
    let problem = &mut ba.problem;
    let t_rot = problem.add_parameter_block(quat_to_array(&init.rotation).to_vec(), Manifold::Rotation);
    let t_trans = problem.add_parameter_block(init.translation.as_slice().to_vec(), Manifold::Euclidean);
    let mut used = 0;
    for a in &annotations.annotations {
        let Some(b) = ba.view_blocks.get(&a.view_id) else { continue };
        let view = &recon.views[&a.view_id];
        problem.add_residual_block(
            Box::new(AnnotationReprojection {
                observed: a.pixel(),
                world: a.world(),
                cx: view.intrinsics.cx,
                cy: view.intrinsics.cy,
            }),
            Loss::Huber(cfg.huber_delta_px),
            vec![b.rotation, b.focal, b.distortion, t_rot, t_trans],
        );
        used += 1;
    }
    if used == 0 {
        return Err(Error::Georef("no annotation lies on a registered view".into()));
    }
    let report = solver::solve(problem, &cfg.solver);
    if report.termination == Termination::Failure {
        return Err(Error::Georef("georeferencing adjustment failed".into()));
    }
    let rotation = quat_from_slice(ba.problem.values(t_rot));
    let t = ba.problem.values(t_trans);
    let transform = RigidTransform::new(rotation, Vector3::new(t[0], t[1], t[2]));
    ba.apply(&mut recon, cfg)?;

    let limit = cfg.outlier_factor * cfg.huber_delta_px;
    let flagged: Vec<usize> = annotation_errors(&recon, annotations, &transform)
        .iter()
        .enumerate()
        .filter(|(i, e)| recon.views.contains_key(&annotations.annotations[*i].view_id) && **e > limit)
        .map(|(i, _)| i)
        .collect();
    for &i in &flagged {
        let a = &annotations.annotations[i];
        log::warn!("annotation {i} on view {} is an outlier", a.view_id);
    }
    Ok(GeoReconstruction { reconstruction: recon, transform, flagged_annotations: flagged, report })
}

/// Initial estimate followed by joint refinement.
pub fn georeference(
    recon: Reconstruction,
    annotations: &AnnotationFile,
    georef_cfg: &GeorefConfig,
    iba_cfg: &IbaConfig,
) -> Result<GeoReconstruction> {
    let init = estimate_initial_transform(&recon, annotations, georef_cfg)?;
    georef_bundle_adjust(recon, annotations, init, iba_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, PoseLocal};

    fn two_view_recon(rot_a: UnitQuaternion<f64>, rot_b: UnitQuaternion<f64>) -> Reconstruction {
        let mut recon = Reconstruction::default();
        for (id, r) in [("a", rot_a), ("b", rot_b)] {
            let view = ViewParams { intrinsics: Intrinsics::new(1500.0, 1920, 1080), pose: PoseLocal::from_rotation(r) };
            recon.views.insert(ViewId::from(id), view);
            recon.registered.push(ViewId::from(id));
        }
        recon
    }

    fn annotate(recon: &Reconstruction, t: &RigidTransform, view: &str, points: &[Vector3<f64>]) -> Vec<AnnotationRecord> {
        let v = &recon.views[&ViewId::from(view)];
        points
            .iter()
            .filter_map(|x| {
                project_point(v, &t.apply(x)).ok().map(|p| AnnotationRecord::new(ViewId::from(view), p, *x))
            })
            .collect()
    }

    fn points_ahead(t: &RigidTransform, view: &ViewParams, n: usize) -> Vec<Vector3<f64>> {
        let inv = t.inverse();
        (0..n)
            .map(|k| {
                let u = 200.0 + (k * 977 % 1500) as f64;
                let v = 150.0 + (k * 613 % 800) as f64;
                let ray = crate::geometry::pixel_to_ray(view, &Vector2::new(u, v)).unwrap().dir;
                inv.apply(&(ray * (20.0 + k as f64 * 3.0)))
            })
            .collect()
    }

    #[test]
    fn absolute_pose_composition() {
        let t = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let view = ViewParams::new(Intrinsics::new(1000.0, 640, 480), UnitQuaternion::from_euler_angles(0.0, 0.4, 0.0));
        let p = absolute_pose(&view, &t);
        let x = Vector3::new(10.0, -4.0, 7.0);
        let via_local = view.pose.rotation * t.apply(&x);
        assert!((p.to_camera(&x) - via_local).norm() < 1e-12);
    }

    #[test]
    fn initial_transform_recovers_truth() {
        let recon = two_view_recon(UnitQuaternion::identity(), UnitQuaternion::from_euler_angles(0.0, 0.3, 0.0));
        let truth = RigidTransform::new(
            UnitQuaternion::from_euler_angles(-1.2, 0.1, 2.0),
            Vector3::new(-120.0, 40.0, -15.0),
        );
        let mut anns = Vec::new();
        for id in ["a", "b"] {
            let pts = points_ahead(&truth, &recon.views[&ViewId::from(id)], 10);
            anns.extend(annotate(&recon, &truth, id, &pts));
        }
        let file = AnnotationFile { annotations: anns };
        let t = estimate_initial_transform(&recon, &file, &GeorefConfig::default()).unwrap();
        assert!(rotation_angle_between(&t.rotation, &truth.rotation) < 1e-8);
        assert!((t.translation - truth.translation).norm() < 1e-5);
        assert!(annotation_errors(&recon, &file, &t).iter().all(|e| *e < 1e-5));
    }

    #[test]
    fn inconsistent_views_are_rejected() {
        let recon = two_view_recon(UnitQuaternion::identity(), UnitQuaternion::from_euler_angles(0.0, 0.3, 0.0));
        let truth = RigidTransform::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 0.0));
        let wrong = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.6), Vector3::zeros());
        let mut anns = annotate(&recon, &truth, "a", &points_ahead(&truth, &recon.views[&ViewId::from("a")], 8));
        anns.extend(annotate(&recon, &wrong, "b", &points_ahead(&wrong, &recon.views[&ViewId::from("b")], 8)));
        let file = AnnotationFile { annotations: anns };
        assert!(matches!(
            estimate_initial_transform(&recon, &file, &GeorefConfig::default()),
            Err(Error::Georef(_))
        ));
    }

    #[test]
    fn too_few_annotations_fail() {
        let recon = two_view_recon(UnitQuaternion::identity(), UnitQuaternion::from_euler_angles(0.0, 0.3, 0.0));
        let t = RigidTransform::identity();
        let pts = points_ahead(&t, &recon.views[&ViewId::from("a")], 3);
        let file = AnnotationFile { annotations: annotate(&recon, &t, "a", &pts) };
        assert!(matches!(
            estimate_initial_transform(&recon, &file, &GeorefConfig::default()),
            Err(Error::Georef(_))
        ));
    }

    #[test]
    fn annotation_file_round_trip_uses_upper_case_world_keys() {
        let file = AnnotationFile {
            annotations: vec![AnnotationRecord::new(ViewId::from("v000"), Vector2::new(1.0, 2.0), Vector3::new(3.0, 4.0, 5.0))],
        };
        let s = serde_json::to_string(&file).unwrap();
        assert!(s.contains("\"X\":3.0") && s.contains("\"u\":1.0"));
        let back: AnnotationFile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, file);
    }
}
