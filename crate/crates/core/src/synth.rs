//! Synthetic PTZ scenes with ground truth.
//!
//! A camera sits at a fixed world position and sweeps a full pan circle with
//! smoothly varying tilt and focal length. Scene points lie on a spherical
//! shell around it. Every projected observation gets Gaussian pixel noise,
//! and the noisy pixels are emitted as pairwise matches exactly as an
//! external feature matcher would write them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correspondence::{MatchFile, MatchRecord, ViewInfo};
use crate::geometry::{pixel_to_ray, Intrinsics, PoseLocal, RigidTransform, ViewParams};
use crate::georef::{AnnotationFile, AnnotationRecord};
use crate::io::{self, CameraRecord, TransformRecord};
use crate::{par, Error, Result, ViewId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_views: usize,
    pub num_ref_views: usize,
    pub num_points: usize,
    pub shell_radius_m: [f64; 2],
    /// Elevation band of scene points, degrees above the horizon.
    pub elevation_band_deg: [f64; 2],
    pub pan_range_deg: f64,
    pub tilt_range_deg: [f64; 2],
    /// Range of the per-scene base focal length.
    pub focal_range_px: [f64; 2],
    /// Relative amplitude of the focal (zoom) schedule around its base.
    pub focal_variation: f64,
    pub noise_sigma_px: f64,
    /// Symmetric sampling half-ranges of `k1`, `k2` and both `p` terms.
    pub distortion_ranges: [f64; 3],
    pub image_width: u32,
    pub image_height: u32,
    pub annotated_views: usize,
    pub points_per_annotated_view: usize,
    pub camera_center: [f64; 3],
    /// Views sharing fewer points than this are not matched.
    pub min_shared_points: usize,
    /// Fraction of emitted match pairs replaced by random pixels.
    pub outlier_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            num_views: 180,
            num_ref_views: 30,
            num_points: 6000,
            shell_radius_m: [20.0, 100.0],
            elevation_band_deg: [-55.0, 25.0],
            pan_range_deg: 360.0,
            tilt_range_deg: [-25.0, -5.0],
            focal_range_px: [1300.0, 1900.0],
            focal_variation: 0.1,
            noise_sigma_px: 3.0,
            distortion_ranges: [0.2, 0.05, 0.01],
            image_width: 1920,
            image_height: 1080,
            annotated_views: 2,
            points_per_annotated_view: 30,
            camera_center: [120.0, -40.0, 15.0],
            min_shared_points: 40,
            outlier_fraction: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if !(self.noise_sigma_px >= 0.0) {
            return bad("noise_sigma_px must be non-negative");
        }
        if self.num_ref_views < 2 || self.num_ref_views > self.num_views {
            return bad("num_ref_views must be in [2, num_views]");
        }
        if !(self.pan_range_deg > 0.0 && self.pan_range_deg <= 360.0) {
            return bad("pan coverage must be in (0, 360] degrees");
        }
        if !(self.shell_radius_m[0] > 0.0 && self.shell_radius_m[0] <= self.shell_radius_m[1]) {
            return bad("invalid shell radii");
        }
        if self.focal_range_px[0] <= 0.0 || self.focal_range_px[0] > self.focal_range_px[1] {
            return bad("invalid focal range");
        }
        if self.tilt_range_deg[0] > self.tilt_range_deg[1] || self.elevation_band_deg[0] > self.elevation_band_deg[1] {
            return bad("invalid tilt or elevation range");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 1)");
        }
        if self.annotated_views > self.num_ref_views {
            return bad("more annotated views than reference views");
        }
        Ok(())
    }
}

/// World-to-camera rotation looking along pan `pan` and tilt `tilt` (radians)
/// in a z-up world, with image x to the right and image y downwards.
pub fn look_rotation(pan: f64, tilt: f64) -> UnitQuaternion<f64> {
    let forward = Vector3::new(tilt.cos() * pan.sin(), tilt.cos() * pan.cos(), tilt.sin());
    let right = Vector3::new(pan.cos(), -pan.sin(), 0.0);
    let down = forward.cross(&right);
    let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True parameters with world-frame poses (all share the camera center).
    pub views: BTreeMap<ViewId, ViewParams>,
    /// World-to-local transform.
    pub transform: RigidTransform,
    pub points: Vec<Vector3<f64>>,
    /// Noisy observations per view as (point index, pixel), by point index.
    pub observations: BTreeMap<ViewId, Vec<(usize, Vector2<f64>)>>,
    /// All views in capture (stream) order.
    pub order: Vec<ViewId>,
}

impl GroundTruth {
    /// True parameters of a view expressed in the local frame.
    pub fn local_view(&self, id: &ViewId) -> Option<ViewParams> {
        let w = self.views.get(id)?;
        Some(ViewParams::new(w.intrinsics, w.pose.rotation * self.transform.rotation.inverse()))
    }

    pub fn world_center(&self) -> Vector3<f64> {
        self.transform.inverse().translation
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub truth: GroundTruth,
    pub references: Vec<ViewId>,
    pub queries: Vec<ViewId>,
    pub offline_matches: MatchFile,
    pub online_matches: MatchFile,
    pub annotations: AnnotationFile,
}

pub fn view_name(i: usize) -> ViewId {
    ViewId::new(format!("v{i:03}"))
}

/// Splits views into evenly spaced references and `count` queries, both in
/// stream order.
pub fn holdout_views(order: &[ViewId], count: usize) -> Result<(Vec<ViewId>, Vec<ViewId>)> {
    let n = order.len();
    if count >= n {
        return Err(Error::InvalidInput(format!("cannot hold out {count} of {n} views")));
    }
    let refs = n - count;
    let ref_idx: std::collections::BTreeSet<usize> = (0..refs).map(|k| k * n / refs).collect();
    let (mut r, mut q) = (Vec::new(), Vec::new());
    for (i, v) in order.iter().enumerate() {
        if ref_idx.contains(&i) {
            r.push(v.clone());
        } else {
            q.push(v.clone());
        }
    }
    Ok((r, q))
}

fn sample_symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15) ^ stream.wrapping_mul(0xbf58476d1ce4e5b9).rotate_left(17)
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

/// Builds a scene, its match files and annotations from `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = Vector3::from(cfg.camera_center);
    let n = cfg.num_views;

    // schedules
    let [tlo, thi] = cfg.tilt_range_deg;
    let tilt_mid = rng.random_range(tlo + 0.25 * (thi - tlo)..=thi - 0.25 * (thi - tlo));
    let tilt_amp = 0.25 * (thi - tlo);
    let tilt_phase = rng.random_range(0.0..2.0 * PI);
    let f_base = rng.random_range(cfg.focal_range_px[0]..=cfg.focal_range_px[1]);
    let f_phase = rng.random_range(0.0..2.0 * PI);
    let [dk1, dk2, dp] = cfg.distortion_ranges;

    let mut views = BTreeMap::new();
    let mut order = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 / n as f64;
        let pan = (cfg.pan_range_deg * s).to_radians();
        let tilt = (tilt_mid + tilt_amp * (2.0 * PI * s + tilt_phase).sin()).to_radians();
        let f = f_base * (1.0 + cfg.focal_variation * (4.0 * PI * s + f_phase).sin());
        let d = [
            sample_symmetric(&mut rng, dk1),
            sample_symmetric(&mut rng, dk2),
            sample_symmetric(&mut rng, dp),
            sample_symmetric(&mut rng, dp),
        ];
        let intr = Intrinsics::new(f, cfg.image_width, cfg.image_height).with_distortion(d);
        let pose = PoseLocal { rotation: look_rotation(pan, tilt), center };
        let id = view_name(i);
        views.insert(id.clone(), ViewParams { intrinsics: intr, pose });
        order.push(id);
    }

    let [elo, ehi] = cfg.elevation_band_deg;
    let (slo, shi) = (elo.to_radians().sin(), ehi.to_radians().sin());
    let points: Vec<Vector3<f64>> = (0..cfg.num_points)
        .map(|_| {
            // uniform on the sphere restricted to the band
            let z: f64 = rng.random_range(slo..=shi);
            let az = rng.random_range(0.0..2.0 * PI);
            let rho = (1.0 - z * z).sqrt();
            let dir = Vector3::new(rho * az.cos(), rho * az.sin(), z);
            center + dir * rng.random_range(cfg.shell_radius_m[0]..=cfg.shell_radius_m[1])
        })
        .collect();

    let noise = gaussian(cfg.noise_sigma_px);
    let observations: BTreeMap<ViewId, Vec<(usize, Vector2<f64>)>> = par::map_range(true, n, |i| {
        let id = &order[i];
        let view = &views[id];
        let mut vrng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1 + i as u64));
        let mut obs = Vec::new();
        for (j, p) in points.iter().enumerate() {
            let Some(px) = view.visible_direction(&(p - center).normalize()) else { continue };
            let noisy = match &noise {
                Some(nd) => px + Vector2::new(nd.sample(&mut vrng), nd.sample(&mut vrng)),
                None => px,
            };
            // the noisy pixel must still be a valid keypoint with a ray
            if view.intrinsics.contains(&noisy) && pixel_to_ray(view, &noisy).is_ok() {
                obs.push((j, noisy));
            }
        }
        (id.clone(), obs)
    })
    .into_iter()
    .collect();

    let transform = RigidTransform::new(UnitQuaternion::identity(), -center);
    let truth = GroundTruth { views, transform, points, observations, order: order.clone() };
    let (references, queries) = holdout_views(&order, n - cfg.num_ref_views)?;

    let mut outlier_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0));
    let info = |v: &ViewId| ViewInfo { id: v.clone(), width: cfg.image_width, height: cfg.image_height };
    let mut offline = MatchFile { views: references.iter().map(info).collect(), matches: Vec::new() };
    for (ia, a) in references.iter().enumerate() {
        for b in &references[ia + 1..] {
            if let Some(m) = match_record(&truth, a, b, cfg, &mut outlier_rng) {
                offline.matches.push(m);
            }
        }
    }
    let mut online = MatchFile { views: order.iter().map(info).collect(), matches: Vec::new() };
    let mut prev: Option<&ViewId> = None;
    for q in &queries {
        if let Some(p) = prev {
            if let Some(m) = match_record(&truth, p, q, cfg, &mut outlier_rng) {
                online.matches.push(m);
            }
        }
        for r in &references {
            if let Some(m) = match_record(&truth, q, r, cfg, &mut outlier_rng) {
                online.matches.push(m);
            }
        }
        prev = Some(q);
    }
    for v in &order {
        if truth.observations[v].len() < cfg.min_shared_points {
            log::warn!("view {v} observes only {} points", truth.observations[v].len());
        }
    }

    let annotations = annotate(&truth, &references, cfg);
    Ok(SyntheticScene { config: cfg.clone(), truth, references, queries, offline_matches: offline, online_matches: online, annotations })
}

fn match_record(truth: &GroundTruth, a: &ViewId, b: &ViewId, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<MatchRecord> {
    let (oa, ob) = (&truth.observations[a], &truth.observations[b]);
    let lookup: BTreeMap<usize, Vector2<f64>> = ob.iter().copied().collect();
    let mut pairs: Vec<[f64; 4]> =
        oa.iter().filter_map(|(j, pa)| lookup.get(j).map(|pb| [pa.x, pa.y, pb.x, pb.y])).collect();
    if pairs.len() < cfg.min_shared_points {
        return None;
    }
    if cfg.outlier_fraction > 0.0 {
        let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
        for p in pairs.iter_mut() {
            if rng.random::<f64>() < cfg.outlier_fraction {
                p[2] = rng.random_range(0.0..w);
                p[3] = rng.random_range(0.0..h);
            }
        }
    }
    Some(MatchRecord { view_a: a.clone(), view_b: b.clone(), pairs })
}

/// Annotated 2D-3D pairs on evenly spaced reference views.
fn annotate(truth: &GroundTruth, references: &[ViewId], cfg: &SceneConfig) -> AnnotationFile {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX));
    let noise = gaussian(cfg.noise_sigma_px);
    let mut annotations = Vec::new();
    for k in 0..cfg.annotated_views {
        let id = &references[k * references.len() / cfg.annotated_views.max(1)];
        let view = &truth.views[id];
        let visible: Vec<usize> = truth.observations[id].iter().map(|(j, _)| *j).collect();
        let take = cfg.points_per_annotated_view.min(visible.len());
        let chosen = rand::seq::index::sample(&mut rng, visible.len(), take).into_vec();
        let mut chosen: Vec<usize> = chosen.into_iter().map(|c| visible[c]).collect();
        chosen.sort_unstable();
        for j in chosen {
            let world = truth.points[j];
            let Some(px) = view.visible_direction(&(world - view.pose.center).normalize()) else { continue };
            let mut noisy = px;
            if let Some(nd) = &noise {
                noisy += Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng));
            }
            if view.intrinsics.contains(&noisy) {
                annotations.push(AnnotationRecord::new(id.clone(), noisy, world));
            }
        }
    }
    AnnotationFile { annotations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Serialized ground truth: world-frame cameras, transform and points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub cameras: Vec<CameraRecord>,
    pub transform: TransformRecord,
    pub points: Vec<PointRecord>,
    pub references: Vec<ViewId>,
    pub queries: Vec<ViewId>,
}

impl GroundTruthFile {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let t = &scene.truth;
        GroundTruthFile {
            cameras: t.order.iter().map(|v| CameraRecord::new(v.clone(), &t.views[v])).collect(),
            transform: (&t.transform).into(),
            points: t.points.iter().enumerate().map(|(id, p)| PointRecord { id, x: p.x, y: p.y, z: p.z }).collect(),
            references: scene.references.clone(),
            queries: scene.queries.clone(),
        }
    }
}

pub const OFFLINE_MATCHES: &str = "offline_matches.json";
pub const ONLINE_MATCHES: &str = "online_matches.json";
pub const ANNOTATIONS: &str = "annotations.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";

/// Writes the four scene files into `dir` (created when missing).
pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_json(&dir.join(OFFLINE_MATCHES), &scene.offline_matches)?;
    io::write_json(&dir.join(ONLINE_MATCHES), &scene.online_matches)?;
    io::write_json(&dir.join(ANNOTATIONS), &scene.annotations)?;
    io::write_json(&dir.join(GROUND_TRUTH), &GroundTruthFile::from_scene(scene))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::homography_dlt;
    use crate::geometry::project_point;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig { seed, num_views: 36, num_ref_views: 12, num_points: 1500, ..Default::default() }
    }

    #[test]
    fn look_rotation_axes() {
        let r = look_rotation(0.0, 0.0);
        let fwd = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((fwd - Vector3::z()).norm() < 1e-12);
        // world up appears towards the top of the image (negative y)
        assert!((r * Vector3::z()).y < 0.0);
        let r = look_rotation(0.5, -0.3);
        assert!((r.to_rotation_matrix().matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn holdout_split() {
        let order: Vec<ViewId> = (0..180).map(view_name).collect();
        let (r, q) = holdout_views(&order, 150).unwrap();
        assert_eq!((r.len(), q.len()), (30, 150));
        assert_eq!(r[1], view_name(6));
        assert!(r.iter().all(|v| !q.contains(v)));
        let (r, q) = holdout_views(&order, 179).unwrap();
        assert_eq!((r.len(), q.len()), (1, 179));
        assert!(holdout_views(&order, 180).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_scene(&small(5)).unwrap();
        let b = generate_scene(&small(5)).unwrap();
        assert_eq!(a.offline_matches, b.offline_matches);
        assert_eq!(a.online_matches, b.online_matches);
        assert_eq!(a.annotations, b.annotations);
        let c = generate_scene(&small(6)).unwrap();
        assert_ne!(a.offline_matches, c.offline_matches);
    }

    #[test]
    fn noise_free_matches_follow_true_homography() {
        let cfg = SceneConfig { noise_sigma_px: 0.0, distortion_ranges: [0.0; 3], ..small(1) };
        let scene = generate_scene(&cfg).unwrap();
        let m = &scene.offline_matches.matches[0];
        let (va, vb) = (&scene.truth.views[&m.view_a], &scene.truth.views[&m.view_b]);
        // H_ba = K_b R_b R_a^T K_a^-1
        let h = vb.intrinsics.k_matrix()
            * (vb.pose.rotation * va.pose.rotation.inverse()).to_rotation_matrix().matrix()
            * va.intrinsics.k_inverse();
        for p in &m.pairs {
            let q = h * Vector3::new(p[0], p[1], 1.0);
            let err = (Vector2::new(q.x / q.z, q.y / q.z) - Vector2::new(p[2], p[3])).norm();
            assert!(err < 1e-6, "{err}");
        }
        let a: Vec<Vector2<f64>> = m.pairs.iter().map(|p| Vector2::new(p[0], p[1])).collect();
        let b: Vec<Vector2<f64>> = m.pairs.iter().map(|p| Vector2::new(p[2], p[3])).collect();
        assert!(homography_dlt(&a, &b).is_some());
    }

    #[test]
    fn matches_link_the_same_hidden_point() {
        let scene = generate_scene(&small(2)).unwrap();
        let t = &scene.truth;
        for m in &scene.offline_matches.matches {
            let oa: BTreeMap<(u64, u64), usize> =
                t.observations[&m.view_a].iter().map(|(j, p)| ((p.x.to_bits(), p.y.to_bits()), *j)).collect();
            let ob: BTreeMap<(u64, u64), usize> =
                t.observations[&m.view_b].iter().map(|(j, p)| ((p.x.to_bits(), p.y.to_bits()), *j)).collect();
            for p in &m.pairs {
                assert_eq!(oa[&(p[0].to_bits(), p[1].to_bits())], ob[&(p[2].to_bits(), p[3].to_bits())]);
            }
        }
    }

    #[test]
    fn observation_noise_has_configured_sigma() {
        let cfg = SceneConfig { noise_sigma_px: 2.0, ..small(3) };
        let scene = generate_scene(&cfg).unwrap();
        let t = &scene.truth;
        let mut sq = 0.0;
        let mut count = 0usize;
        for (v, obs) in &t.observations {
            for (j, px) in obs {
                let clean = project_point(&t.views[v], &t.points[*j]).unwrap();
                sq += (px - clean).norm_squared();
                count += 2;
            }
        }
        assert!(count >= 5_000, "{count}");
        let sd = (sq / count as f64).sqrt();
        assert!((sd - 2.0).abs() < 0.2, "{sd}");
    }

    #[test]
    fn stored_points_project_inside_their_views() {
        let scene = generate_scene(&small(4)).unwrap();
        let t = &scene.truth;
        for (v, obs) in &t.observations {
            for (j, _) in obs {
                let px = project_point(&t.views[v], &t.points[*j]).unwrap();
                assert!(t.views[v].intrinsics.contains(&px));
            }
        }
    }

    #[test]
    fn annotations_and_queries_layout() {
        let scene = generate_scene(&small(7)).unwrap();
        let ann = &scene.annotations.annotations;
        let views: std::collections::BTreeSet<&ViewId> = ann.iter().map(|a| &a.view_id).collect();
        assert_eq!(views.len(), 2);
        assert!(views.iter().all(|v| scene.references.contains(v)));
        assert!(ann.len() >= 50);
        // queries never appear in the offline file
        assert!(scene.offline_matches.views.iter().all(|v| !scene.queries.contains(&v.id)));
        let local = scene.truth.local_view(&scene.references[0]).unwrap();
        assert_eq!(local.pose.center, Vector3::zeros());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SceneConfig { noise_sigma_px: -1.0, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { num_ref_views: 1, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { pan_range_deg: 400.0, ..Default::default() }.validate().is_err());
    }
}
