//! End-to-end wiring: configuration, file formats and the stage runners used
//! by the command-line tool and the scene-level tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::correspondence::{build_tracks, filter_tracks, MatchFile, MatchGraph, RansacOptions, Track};
use crate::eval::{evaluate, MetricReport, WorldCamera};
use crate::georef::{absolute_pose, georeference, AnnotationFile, GeoReconstruction, GeorefConfig};
use crate::iba::{run_iba, BaLogEntry, IbaConfig, Reconstruction, RegistrationEvent};
use crate::io::{CameraRecord, TransformRecord};
use crate::online::{localize_queries, EstimateSource, OnlineConfig, QueryResult, ReferenceDatabase};
use crate::polygon::Polygon;
use crate::synth::{GroundTruth, SceneConfig, SyntheticScene};
use crate::{Error, RayLandmark, Result, RigidTransform, TrackId, ViewId, ViewParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds scene generation and RANSAC.
    pub seed: u64,
    /// Use the data-parallel code paths.
    pub parallel: bool,
    pub scene: SceneConfig,
    pub ransac: RansacOptions,
    pub iba: IbaConfig,
    pub georef: GeorefConfig,
    pub online: OnlineConfig,
    /// Half side in meters of the square ground template around the camera
    /// used for part-mode IoU on synthetic scenes.
    pub template_half_size_m: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            parallel: true,
            scene: SceneConfig::default(),
            ransac: RansacOptions::default(),
            iba: IbaConfig::default(),
            georef: GeorefConfig::default(),
            online: OnlineConfig::default(),
            template_half_size_m: 200.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Copies the global seed and parallel switch into the module configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scene.seed = c.seed;
        c.ransac.seed = c.seed;
        c.iba.solver.parallel = c.parallel;
        c.online.solver.parallel = c.parallel;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.iba.validate()?;
        self.online.validate()?;
        if !(self.ransac.threshold_px > 0.0) || self.ransac.min_inliers < 4 {
            return Err(Error::InvalidInput("ransac threshold must be positive and min_inliers at least 4".into()));
        }
        if !(self.template_half_size_m > 0.0) {
            return Err(Error::InvalidInput("template_half_size_m must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// file formats

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Some input views were not registered.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub view_id: ViewId,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub track_id: TrackId,
    pub dir: [f64; 3],
    pub observations: Vec<ObservationRecord>,
}

/// Calibrated reference views, their landmarks and the run logs. Cameras
/// are in the local frame; `transform` maps the world frame into it once
/// the reconstruction is georeferenced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Registration order; the first view fixes the rotation gauge.
    pub registered: Vec<ViewId>,
    pub cameras: Vec<CameraRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_center: Option<[f64; 3]>,
    pub landmarks: Vec<LandmarkRecord>,
    pub registration_log: Vec<RegistrationEvent>,
    pub ba_log: Vec<BaLogEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_annotations: Vec<usize>,
}

impl ReconstructionFile {
    pub fn new(recon: &Reconstruction, status: RunStatus) -> Self {
        let landmarks = recon
            .landmarks
            .iter()
            .map(|(id, l)| LandmarkRecord {
                track_id: *id,
                dir: [l.dir.x, l.dir.y, l.dir.z],
                observations: recon
                    .registered_observations(&recon.tracks[id])
                    .map(|(v, p)| ObservationRecord { view_id: v.clone(), u: p.x, v: p.y })
                    .collect(),
            })
            .collect();
        ReconstructionFile {
            status,
            message: None,
            registered: recon.registered.clone(),
            cameras: recon.views.iter().map(|(id, v)| CameraRecord::new(id.clone(), v)).collect(),
            transform: None,
            world_center: None,
            landmarks,
            registration_log: recon.registration_log.clone(),
            ba_log: recon.ba_log.clone(),
            flagged_annotations: Vec::new(),
        }
    }

    pub fn georeferenced(geo: &GeoReconstruction, status: RunStatus) -> Self {
        let c = geo.world_center();
        ReconstructionFile {
            transform: Some((&geo.transform).into()),
            world_center: Some([c.x, c.y, c.z]),
            flagged_annotations: geo.flagged_annotations.clone(),
            ..Self::new(&geo.reconstruction, status)
        }
    }

    pub fn failed(message: String) -> Self {
        ReconstructionFile {
            status: RunStatus::Failed,
            message: Some(message),
            registered: Vec::new(),
            cameras: Vec::new(),
            transform: None,
            world_center: None,
            landmarks: Vec::new(),
            registration_log: Vec::new(),
            ba_log: Vec::new(),
            flagged_annotations: Vec::new(),
        }
    }

    pub fn transform(&self) -> Result<Option<RigidTransform>> {
        self.transform.as_ref().map(TransformRecord::to_transform).transpose()
    }

    /// Rebuilds the in-memory reconstruction; tracks are the landmark
    /// observations.
    pub fn to_reconstruction(&self) -> Result<Reconstruction> {
        if self.status == RunStatus::Failed {
            return Err(Error::InvalidInput("reconstruction file records a failed run".into()));
        }
        let mut recon = Reconstruction::default();
        for c in &self.cameras {
            recon.views.insert(c.view_id.clone(), c.to_view()?);
        }
        let listed: BTreeSet<&ViewId> = self.registered.iter().collect();
        if listed.len() != recon.views.len() || self.registered.iter().any(|v| !recon.views.contains_key(v)) {
            return Err(Error::Parse("registered list does not match the cameras".into()));
        }
        recon.registered = self.registered.clone();
        for l in &self.landmarks {
            let dir = Vector3::from(l.dir);
            let landmark = RayLandmark::new(dir).map_err(|e| Error::Parse(format!("landmark {}: {e}", l.track_id)))?;
            let observations = l
                .observations
                .iter()
                .map(|o| {
                    if recon.views.contains_key(&o.view_id) {
                        Ok((o.view_id.clone(), Vector2::new(o.u, o.v)))
                    } else {
                        Err(Error::UnknownView(o.view_id.clone()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            recon.tracks.insert(l.track_id, Track { id: l.track_id, observations });
            recon.landmarks.insert(l.track_id, landmark);
        }
        recon.registration_log = self.registration_log.clone();
        recon.ba_log = self.ba_log.clone();
        Ok(recon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub view_id: ViewId,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ViewId>,
    pub overlap: f64,
    pub inliers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<EstimateSource>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
}

/// Online results: local-frame cameras of the localized frames plus
/// per-frame diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformRecord>,
    pub cameras: Vec<CameraRecord>,
    pub queries: Vec<QueryRecord>,
}

impl LocalizationFile {
    pub fn new(results: &[QueryResult], transform: Option<&RigidTransform>) -> Self {
        LocalizationFile {
            transform: transform.map(Into::into),
            cameras: results
                .iter()
                .filter_map(|r| r.params.map(|p| CameraRecord::new(r.view_id.clone(), &p)))
                .collect(),
            queries: results
                .iter()
                .map(|r| QueryRecord {
                    view_id: r.view_id.clone(),
                    success: r.params.is_some(),
                    reference: r.reference.clone(),
                    overlap: r.overlap,
                    inliers: r.inliers,
                    source: r.source,
                    message: r.message.clone(),
                })
                .collect(),
        }
    }
}

/// The parts of a reconstruction or localization file needed to score it.
#[derive(Debug, Clone, Deserialize)]
pub struct CameraSet {
    pub cameras: Vec<CameraRecord>,
    #[serde(default)]
    pub transform: Option<TransformRecord>,
}

impl CameraSet {
    pub fn world_cameras(&self) -> Result<BTreeMap<ViewId, WorldCamera>> {
        let t = self
            .transform
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("cameras are not georeferenced".into()))?
            .to_transform()?;
        let mut out = BTreeMap::new();
        for c in &self.cameras {
            out.insert(c.view_id.clone(), world_camera(&c.to_view()?, &t));
        }
        Ok(out)
    }
}

pub fn world_camera(local: &ViewParams, transform: &RigidTransform) -> WorldCamera {
    WorldCamera { intrinsics: local.intrinsics, pose: absolute_pose(local, transform) }
}

/// Ground-truth cameras keyed by view.
pub fn truth_cameras(views: &BTreeMap<ViewId, ViewParams>) -> BTreeMap<ViewId, WorldCamera> {
    views
        .iter()
        .map(|(id, v)| {
            let pose = crate::pnp::WorldPose { rotation: v.pose.rotation, center: v.pose.center };
            (id.clone(), WorldCamera { intrinsics: v.intrinsics, pose })
        })
        .collect()
}

/// Square ground template centered below the camera.
pub fn ground_template(center: &Vector3<f64>, half_size_m: f64) -> Polygon {
    let h = Vector2::new(half_size_m, half_size_m);
    Polygon::rectangle(center.xy() - h, center.xy() + h)
}

// ---------------------------------------------------------------------------
// stages

/// Parses a match file and runs RANSAC on every edge.
pub fn verified_graph(file: &MatchFile, ransac: &RansacOptions, parallel: bool) -> Result<MatchGraph> {
    let mut graph = file.to_graph()?;
    graph.verify(ransac, parallel);
    Ok(graph)
}

/// Offline calibration in the local frame.
pub fn calibrate(file: &MatchFile, cfg: &PipelineConfig) -> Result<(Reconstruction, RunStatus)> {
    let graph = verified_graph(file, &cfg.ransac, cfg.parallel)?;
    let tracks = filter_tracks(build_tracks(&graph), cfg.iba.min_track_len);
    log::info!("{} verified edges, {} tracks", graph.match_sets.len(), tracks.len());
    let recon = run_iba(&graph, &tracks, &cfg.iba)?;
    let status = if recon.registered.len() == graph.views.len() { RunStatus::Complete } else { RunStatus::Partial };
    if status == RunStatus::Partial {
        log::warn!("{} of {} views registered", recon.registered.len(), graph.views.len());
    }
    Ok((recon, status))
}

/// Views of an online match file that are not references, in id order.
pub fn query_views(graph: &MatchGraph, db: &ReferenceDatabase) -> Vec<ViewId> {
    graph.views.iter().map(|v| v.id.clone()).filter(|v| !db.views.contains_key(v)).collect()
}

pub fn localize(db: &ReferenceDatabase, file: &MatchFile, cfg: &PipelineConfig) -> Result<Vec<QueryResult>> {
    let graph = verified_graph(file, &cfg.ransac, cfg.parallel)?;
    let queries = query_views(&graph, db);
    localize_queries(db, &graph, &queries, &cfg.online, cfg.parallel)
}

/// Everything produced for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneRun {
    pub geo: GeoReconstruction,
    pub status: RunStatus,
    pub online: Vec<QueryResult>,
    pub offline_report: MetricReport,
    pub online_report: MetricReport,
}

impl SceneRun {
    pub fn reconstruction_file(&self) -> ReconstructionFile {
        ReconstructionFile::georeferenced(&self.geo, self.status)
    }

    pub fn localization_file(&self) -> LocalizationFile {
        LocalizationFile::new(&self.online, Some(&self.geo.transform))
    }
}

/// Offline calibration, georeferencing, online localization and scoring of
/// one synthetic scene.
pub fn run_scene(name: &str, scene: &SyntheticScene, cfg: &PipelineConfig) -> Result<SceneRun> {
    let (recon, status) = calibrate(&scene.offline_matches, cfg)?;
    let geo = georeference(recon, &scene.annotations, &cfg.georef, &cfg.iba)?;
    let db = ReferenceDatabase::from_reconstruction(&geo.reconstruction, Some(geo.transform))?;
    let online = localize(&db, &scene.online_matches, cfg)?;
    let (offline_report, online_report) = score_scene(name, &scene.truth, &scene.references, &scene.queries, &geo, &online, cfg)?;
    Ok(SceneRun { geo, status, online, offline_report, online_report })
}

/// Offline and online metric reports for one scene.
pub fn score_scene(
    name: &str,
    truth: &GroundTruth,
    references: &[ViewId],
    queries: &[ViewId],
    geo: &GeoReconstruction,
    online: &[QueryResult],
    cfg: &PipelineConfig,
) -> Result<(MetricReport, MetricReport)> {
    let truth_cams = truth_cameras(&truth.views);
    let template = ground_template(&truth.world_center(), cfg.template_half_size_m);
    let offline: BTreeMap<ViewId, WorldCamera> =
        geo.reconstruction.views.iter().map(|(id, v)| (id.clone(), world_camera(v, &geo.transform))).collect();
    let online_cams: BTreeMap<ViewId, WorldCamera> = online
        .iter()
        .filter_map(|r| r.params.map(|p| (r.view_id.clone(), world_camera(&p, &geo.transform))))
        .collect();
    let off = evaluate(name, "offline", &offline, &truth_cams, references, Some(&template), cfg.parallel)?;
    let on = evaluate(name, "online", &online_cams, &truth_cams, queries, Some(&template), cfg.parallel)?;
    Ok((off, on))
}

/// Loads annotations from a scene directory or any path.
pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    crate::georef::load_annotations(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn small_config(sigma: f64) -> PipelineConfig {
        let mut cfg = PipelineConfig { seed: 11, ..Default::default() };
        cfg.scene = SceneConfig { num_views: 72, num_ref_views: 24, num_points: 4000, noise_sigma_px: sigma, ..cfg.scene };
        cfg.resolved()
    }

    #[test]
    fn config_parses_partial_toml() {
        let cfg = PipelineConfig::from_toml("seed = 5\n[iba]\nshare_distortion = true\n[ransac]\nthreshold_px = 6.0\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert!(cfg.iba.share_distortion);
        assert_eq!(cfg.ransac.threshold_px, 6.0);
        assert_eq!(cfg.online.overlap_threshold, 0.3);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        let r = cfg.resolved();
        assert_eq!((r.scene.seed, r.ransac.seed), (5, 5));
    }

    #[test]
    fn noise_free_small_scene_round_trips_through_files() {
        let cfg = small_config(0.0);
        let scene = generate_scene(&cfg.scene).unwrap();
        let run = run_scene("s", &scene, &cfg).unwrap();
        assert_eq!(run.status, RunStatus::Complete, "{:?} {:?}", run.geo.reconstruction.registered, run.geo.reconstruction.registration_log);
        assert!(run.offline_report.views.iter().all(|v| v.fle_px < 1e-2 && v.ape_rot_deg < 1e-3 && v.ape_trans_m < 1e-3));
        assert!(run.online.iter().all(|r| r.params.is_some()));

        let file = run.reconstruction_file();
        let text = serde_json::to_string(&file).unwrap();
        let back: ReconstructionFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        let recon = back.to_reconstruction().unwrap();
        recon.validate(2).unwrap();
        assert_eq!(recon.views, run.geo.reconstruction.views);
        let set: CameraSet = serde_json::from_str(&text).unwrap();
        assert_eq!(set.world_cameras().unwrap().len(), recon.views.len());
    }
}
