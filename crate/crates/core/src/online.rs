//! Online relocalization of new frames against calibrated reference views.
//!
//! A frame is first estimated from the previous frame (sequential mode) or
//! from its best-matched reference (stateless mode). The reference with the
//! most verified matches among those overlapping the estimate is then used
//! to refine the frame against fixed rays.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::correspondence::MatchGraph;
use crate::geometry::{pixel_to_ray, project_ray, Intrinsics, RayLandmark, RigidTransform, ViewParams};
use crate::iba::{solve_view, Reconstruction, ViewSolve};
use crate::solver::SolverOptions;
use crate::{par, Error, Result, TrackId, ViewId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub overlap_threshold: f64,
    /// Samples per image side for the overlap estimate.
    pub overlap_grid: usize,
    /// Bootstrap each frame from the previous one when possible.
    pub sequential: bool,
    pub min_inlier_landmarks: usize,
    pub huber_delta_px: f64,
    pub outlier_factor: f64,
    pub solver: SolverOptions,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            overlap_threshold: 0.3,
            overlap_grid: 16,
            sequential: true,
            min_inlier_landmarks: 12,
            huber_delta_px: 4.0,
            outlier_factor: 3.0,
            solver: SolverOptions::default(),
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::InvalidInput("overlap_threshold must be in [0, 1]".into()));
        }
        if self.overlap_grid == 0 || self.min_inlier_landmarks == 0 {
            return Err(Error::InvalidInput("overlap_grid and min_inlier_landmarks must be positive".into()));
        }
        if !(self.huber_delta_px > 0.0) {
            return Err(Error::InvalidInput("huber_delta_px must be positive".into()));
        }
        Ok(())
    }

    fn outlier_px(&self) -> f64 {
        self.outlier_factor * self.huber_delta_px
    }
}

/// Calibrated reference views with their landmark observations.
#[derive(Debug, Clone, Default)]
pub struct ReferenceDatabase {
    pub views: BTreeMap<ViewId, ViewParams>,
    /// World to local frame, when georeferenced.
    pub transform: Option<RigidTransform>,
    pub landmarks: BTreeMap<TrackId, RayLandmark>,
    /// Landmark observations per view, sorted by track id.
    pub index: BTreeMap<ViewId, Vec<(TrackId, Vector2<f64>)>>,
    lookup: HashMap<ViewId, HashMap<(u64, u64), TrackId>>,
}

impl ReferenceDatabase {
    pub fn new(
        views: BTreeMap<ViewId, ViewParams>,
        landmarks: BTreeMap<TrackId, RayLandmark>,
        index: BTreeMap<ViewId, Vec<(TrackId, Vector2<f64>)>>,
        transform: Option<RigidTransform>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidInput("reference database has no views".into()));
        }
        let mut lookup: HashMap<ViewId, HashMap<(u64, u64), TrackId>> = HashMap::new();
        for (view, obs) in &index {
            if !views.contains_key(view) {
                return Err(Error::UnknownView(view.clone()));
            }
            for (id, px) in obs {
                if !landmarks.contains_key(id) {
                    return Err(Error::InvalidInput(format!("index refers to unknown landmark {id}")));
                }
                lookup.entry(view.clone()).or_default().insert(bits(px), *id);
            }
        }
        Ok(ReferenceDatabase { views, transform, landmarks, index, lookup })
    }

    pub fn from_reconstruction(recon: &Reconstruction, transform: Option<RigidTransform>) -> Result<Self> {
        Self::new(recon.views.clone(), recon.landmarks.clone(), recon.view_observations(), transform)
    }

    /// Ray behind a reference pixel: the landmark it observes when there is
    /// one, otherwise the back-projected pixel.
    pub fn ray(&self, view: &ViewId, px: &Vector2<f64>) -> Result<Vector3<f64>> {
        if let Some(id) = self.lookup.get(view).and_then(|m| m.get(&bits(px))) {
            return Ok(self.landmarks[id].dir);
        }
        let params = self.views.get(view).ok_or_else(|| Error::UnknownView(view.clone()))?;
        Ok(pixel_to_ray(params, px)?.dir)
    }
}

fn bits(p: &Vector2<f64>) -> (u64, u64) {
    (p.x.to_bits(), p.y.to_bits())
}

/// Fraction of an `n` by `n` grid of pixels of `a` whose rays land inside
/// `b` with positive depth. Pixels of `a` that cannot be back-projected are
/// left out of the count.
pub fn frustum_overlap(a: &ViewParams, b: &ViewParams, n: usize) -> f64 {
    let (w, h) = (a.intrinsics.width as f64, a.intrinsics.height as f64);
    let mut total = 0usize;
    let mut inside = 0usize;
    for i in 0..n {
        for j in 0..n {
            let px = Vector2::new((i as f64 + 0.5) * w / n as f64, (j as f64 + 0.5) * h / n as f64);
            let Ok(ray) = pixel_to_ray(a, &px) else { continue };
            total += 1;
            if project_ray(b, &ray).is_ok_and(|p| b.intrinsics.contains(&p)) {
                inside += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

pub fn symmetric_overlap(a: &ViewParams, b: &ViewParams, n: usize) -> f64 {
    frustum_overlap(a, b, n).min(frustum_overlap(b, a, n))
}

/// Reference to refine against: the one with most verified matches among
/// views whose overlap with the estimate reaches the threshold, otherwise
/// the view of largest overlap. Returns the view and its overlap.
pub fn select_reference(
    estimate: &ViewParams,
    db: &ReferenceDatabase,
    match_counts: &BTreeMap<ViewId, usize>,
    cfg: &OnlineConfig,
    parallel: bool,
) -> (ViewId, f64) {
    let ids: Vec<&ViewId> = db.views.keys().collect();
    let overlaps = par::map(parallel, &ids, |id| symmetric_overlap(estimate, &db.views[*id], cfg.overlap_grid));
    let scored: Vec<(&ViewId, f64, usize)> = ids
        .iter()
        .zip(&overlaps)
        .map(|(id, o)| (*id, *o, match_counts.get(*id).copied().unwrap_or(0)))
        .collect();
    let passing = scored.iter().filter(|s| s.1 >= cfg.overlap_threshold);
    // first maximum in id order wins ties
    let best_by_matches = passing.fold(None::<&(&ViewId, f64, usize)>, |best, s| match best {
        Some(b) if b.2 >= s.2 => best,
        _ => Some(s),
    });
    let chosen = best_by_matches.unwrap_or_else(|| {
        scored.iter().fold(&scored[0], |best, s| if s.1 > best.1 { s } else { best })
    });
    (chosen.0.clone(), chosen.1)
}

/// Estimate of a frame from matches to the previous, calibrated frame.
pub fn bootstrap_estimate(
    prev: &ViewParams,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    query_size: (u32, u32),
    cfg: &OnlineConfig,
) -> Result<ViewSolve> {
    if pairs.len() < cfg.min_inlier_landmarks {
        return Err(Error::Localization(format!("{} matches to the previous frame", pairs.len())));
    }
    let observations: Vec<(Vector3<f64>, Vector2<f64>)> = pairs
        .iter()
        .filter_map(|(p, q)| pixel_to_ray(prev, p).ok().map(|r| (r.dir, *q)))
        .collect();
    let init = with_size(prev, query_size);
    refine(&init, &observations, cfg)
}

/// Refines `estimate` against rays of `reference` matched to the query.
pub fn localize(
    db: &ReferenceDatabase,
    reference: &ViewId,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    estimate: &ViewParams,
    cfg: &OnlineConfig,
) -> Result<ViewSolve> {
    if pairs.len() < cfg.min_inlier_landmarks {
        return Err(Error::Localization(format!("{} verified matches to {reference}", pairs.len())));
    }
    let observations: Vec<(Vector3<f64>, Vector2<f64>)> =
        pairs.iter().filter_map(|(r, q)| db.ray(reference, r).ok().map(|ray| (ray, *q))).collect();
    refine(estimate, &observations, cfg)
}

fn refine(init: &ViewParams, observations: &[(Vector3<f64>, Vector2<f64>)], cfg: &OnlineConfig) -> Result<ViewSolve> {
    let solved = solve_view(init, observations, cfg.huber_delta_px, cfg.outlier_px(), false, &cfg.solver)
        .map_err(|e| Error::Localization(e.to_string()))?;
    if solved.inliers < cfg.min_inlier_landmarks {
        return Err(Error::Localization(format!("{} inliers after refinement", solved.inliers)));
    }
    Ok(solved)
}

fn with_size(params: &ViewParams, (width, height): (u32, u32)) -> ViewParams {
    let mut intr = Intrinsics::new(params.intrinsics.f, width, height);
    intr.set_distortion(params.intrinsics.distortion());
    ViewParams { intrinsics: intr, pose: params.pose }
}

/// Matched pixel pairs between two views, oriented `from` to `to`.
pub fn pixel_pairs(graph: &MatchGraph, from: &ViewId, to: &ViewId) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let Some(m) = graph.edge(from, to) else { return Vec::new() };
    let flip = &m.view_a != from;
    m.pairs
        .iter()
        .map(|&(a, b)| {
            let pa = graph.keypoint(&m.view_a, a);
            let pb = graph.keypoint(&m.view_b, b);
            if flip {
                (pb, pa)
            } else {
                (pa, pb)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    PreviousFrame,
    BestReference,
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub view_id: ViewId,
    /// Local-frame parameters; `None` when localization failed.
    pub params: Option<ViewParams>,
    pub reference: Option<ViewId>,
    pub overlap: f64,
    pub inliers: usize,
    pub source: Option<EstimateSource>,
    pub message: String,
}

impl QueryResult {
    fn failed(view_id: &ViewId, message: String) -> Self {
        QueryResult {
            view_id: view_id.clone(),
            params: None,
            reference: None,
            overlap: 0.0,
            inliers: 0,
            source: None,
            message,
        }
    }
}

/// Localizes every query in order. `graph` holds verified matches between
/// queries and references and between consecutive queries.
pub fn localize_queries(
    db: &ReferenceDatabase,
    graph: &MatchGraph,
    queries: &[ViewId],
    cfg: &OnlineConfig,
    parallel: bool,
) -> Result<Vec<QueryResult>> {
    cfg.validate()?;
    for q in queries {
        if graph.view(q).is_none() {
            return Err(Error::UnknownView(q.clone()));
        }
        if db.views.contains_key(q) {
            return Err(Error::InvalidInput(format!("query {q} is also a reference view")));
        }
    }
    if !cfg.sequential {
        return Ok(par::map(parallel, queries, |q| localize_one(db, graph, q, None, cfg, false)));
    }
    let mut results: Vec<QueryResult> = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let prev = i
            .checked_sub(1)
            .and_then(|j| results[j].params.map(|p| (&queries[j], p)));
        results.push(localize_one(db, graph, q, prev, cfg, parallel));
    }
    Ok(results)
}

fn localize_one(
    db: &ReferenceDatabase,
    graph: &MatchGraph,
    query: &ViewId,
    prev: Option<(&ViewId, ViewParams)>,
    cfg: &OnlineConfig,
    parallel: bool,
) -> QueryResult {
    let info = graph.view(query).expect("query checked by caller");
    let size = (info.width, info.height);
    let counts: BTreeMap<ViewId, usize> = db.views.keys().map(|r| (r.clone(), graph.edge_weight(r, query))).collect();

    if let Some((prev_id, prev_params)) = prev {
        let pairs = pixel_pairs(graph, prev_id, query);
        match bootstrap_estimate(&prev_params, &pairs, size, cfg) {
            Ok(estimate) => {
                let (reference, overlap) = select_reference(&estimate.params, db, &counts, cfg, parallel);
                let pairs = pixel_pairs(graph, &reference, query);
                match localize(db, &reference, &pairs, &estimate.params, cfg) {
                    Ok(solved) => {
                        return QueryResult {
                            view_id: query.clone(),
                            params: Some(solved.params),
                            reference: Some(reference),
                            overlap,
                            inliers: solved.inliers,
                            source: Some(EstimateSource::PreviousFrame),
                            message: String::new(),
                        }
                    }
                    Err(e) => log::debug!("{query}: refinement against {reference} failed ({e}); matching all references"),
                }
            }
            Err(e) => log::debug!("{query}: bootstrap failed ({e}); matching all references"),
        }
    }

    // stateless: start from the reference with the most verified matches
    let Some((reference, _)) = counts.iter().filter(|(_, c)| **c > 0).fold(None::<(&ViewId, usize)>, |best, (r, c)| {
        match best {
            Some((_, bc)) if bc >= *c => best,
            _ => Some((r, *c)),
        }
    }) else {
        return QueryResult::failed(query, "no verified matches to any reference".into());
    };
    let estimate = with_size(&db.views[reference], size);
    let pairs = pixel_pairs(graph, reference, query);
    match localize(db, reference, &pairs, &estimate, cfg) {
        Ok(solved) => QueryResult {
            view_id: query.clone(),
            overlap: symmetric_overlap(&solved.params, &db.views[reference], cfg.overlap_grid),
            params: Some(solved.params),
            reference: Some(reference.clone()),
            inliers: solved.inliers,
            source: Some(EstimateSource::BestReference),
            message: String::new(),
        },
        Err(e) => QueryResult::failed(query, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_ray, rotation_angle_between, PoseLocal};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(pan: f64, f: f64) -> ViewParams {
        ViewParams::new(Intrinsics::new(f, 1920, 1080), UnitQuaternion::from_euler_angles(0.0, pan, 0.0))
    }

    fn db_of(views: &[(&str, ViewParams)]) -> ReferenceDatabase {
        let map = views.iter().map(|(id, v)| (ViewId::from(*id), *v)).collect();
        ReferenceDatabase::new(map, BTreeMap::new(), BTreeMap::new(), None).unwrap()
    }

    /// Pixel pairs of shared random directions visible in both views.
    fn shared_pixels(a: &ViewParams, b: &ViewParams, n: usize, seed: u64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let px = Vector2::new(rng.random_range(0.0..1920.0), rng.random_range(0.0..1080.0));
            let ray = pixel_to_ray(a, &px).unwrap();
            if let Ok(q) = project_ray(b, &ray) {
                if b.intrinsics.contains(&q) {
                    out.push((px, q));
                }
            }
        }
        out
    }

    #[test]
    fn overlap_examples() {
        let a = view(0.0, 960.0);
        assert_eq!(frustum_overlap(&a, &a, 16), 1.0);
        let behind = view(std::f64::consts::PI, 960.0);
        assert_eq!(frustum_overlap(&a, &behind, 16), 0.0);
        // 90 degree horizontal field of view, panned by 45 degrees
        let b = view(std::f64::consts::FRAC_PI_4, 960.0);
        let o = frustum_overlap(&a, &b, 16);
        assert!((o - 0.5).abs() < 0.05, "{o}");
        assert_eq!(symmetric_overlap(&a, &b, 16), symmetric_overlap(&b, &a, 16));
    }

    #[test]
    fn reference_selection_rules() {
        let db = db_of(&[("r0", view(0.0, 1500.0)), ("r1", view(0.3, 1500.0)), ("r2", view(1.5, 1500.0))]);
        let cfg = OnlineConfig::default();
        let counts: BTreeMap<ViewId, usize> =
            [("r0", 50), ("r1", 80), ("r2", 500)].iter().map(|(k, v)| (ViewId::from(*k), *v)).collect();
        // identical to r0: r0 and r1 pass, r1 has more matches
        let (r, _) = select_reference(&db.views[&ViewId::from("r0")], &db, &counts, &cfg, false);
        assert_eq!(r.as_str(), "r1");
        // query equal to r2; only r2 passes
        let (r, o) = select_reference(&db.views[&ViewId::from("r2")], &db, &counts, &cfg, false);
        assert_eq!((r.as_str(), o), ("r2", 1.0));
        // no view passes: fall back to the largest overlap
        let strict = OnlineConfig { overlap_threshold: 1.0, ..cfg };
        let (r, _) = select_reference(&view(0.28, 1500.0), &db, &counts, &strict, false);
        assert_eq!(r.as_str(), "r1");
    }

    #[test]
    fn bootstrap_from_identical_frame_keeps_parameters() {
        let prev = ViewParams {
            intrinsics: Intrinsics::new(1500.0, 1920, 1080).with_distortion([-0.1, 0.02, 0.001, 0.0]),
            pose: PoseLocal::from_rotation(UnitQuaternion::from_euler_angles(0.1, 0.4, -0.05)),
        };
        let pairs: Vec<_> = shared_pixels(&prev, &prev, 60, 1).into_iter().map(|(p, _)| (p, p)).collect();
        let est = bootstrap_estimate(&prev, &pairs, (1920, 1080), &OnlineConfig::default()).unwrap();
        assert!(rotation_angle_between(&est.params.pose.rotation, &prev.pose.rotation) < 1e-9);
        assert!((est.params.intrinsics.f - prev.intrinsics.f).abs() < 1e-9 * prev.intrinsics.f);
    }

    #[test]
    fn bootstrap_recovers_small_pan() {
        let prev = view(0.2, 1500.0);
        let truth = view(0.2 + 5f64.to_radians(), 1500.0);
        let pairs = shared_pixels(&prev, &truth, 80, 2);
        let est = bootstrap_estimate(&prev, &pairs, (1920, 1080), &OnlineConfig::default()).unwrap();
        assert!(rotation_angle_between(&est.params.pose.rotation, &truth.pose.rotation) < 1e-6);
    }

    #[test]
    fn bootstrap_with_three_matches_falls_back() {
        let prev = view(0.0, 1500.0);
        let pairs = shared_pixels(&prev, &prev, 3, 3);
        assert!(matches!(
            bootstrap_estimate(&prev, &pairs, (1920, 1080), &OnlineConfig::default()),
            Err(Error::Localization(_))
        ));
    }

    #[test]
    fn localize_novel_pan_and_zoom_noise_free() {
        let reference = ViewParams {
            intrinsics: Intrinsics::new(1400.0, 1920, 1080).with_distortion([-0.12, 0.03, 0.002, -0.001]),
            pose: PoseLocal::from_rotation(UnitQuaternion::from_euler_angles(-0.2, 0.5, 0.0)),
        };
        let truth = ViewParams {
            intrinsics: Intrinsics::new(1650.0, 1920, 1080).with_distortion([0.08, -0.01, -0.001, 0.002]),
            pose: PoseLocal::from_rotation(UnitQuaternion::from_euler_angles(-0.18, 0.62, 0.01)),
        };
        let db = db_of(&[("r", reference)]);
        let pairs = shared_pixels(&reference, &truth, 150, 4);
        let solved = localize(&db, &ViewId::from("r"), &pairs, &reference, &OnlineConfig::default()).unwrap();
        assert!((solved.params.intrinsics.f - truth.intrinsics.f).abs() < 1e-2);
        assert!(rotation_angle_between(&solved.params.pose.rotation, &truth.pose.rotation).to_degrees() < 1e-4);
    }

    #[test]
    fn database_prefers_landmark_rays() {
        let v = view(0.0, 1500.0);
        let px = Vector2::new(100.0, 200.0);
        let dir = Vector3::new(0.1, 0.0, 1.0).normalize();
        let id = ViewId::from("r");
        let db = ReferenceDatabase::new(
            [(id.clone(), v)].into(),
            [(7, RayLandmark { dir })].into(),
            [(id.clone(), vec![(7, px)])].into(),
            None,
        )
        .unwrap();
        assert_eq!(db.ray(&id, &px).unwrap(), dir);
        let other = Vector2::new(960.0, 540.0);
        assert!((db.ray(&id, &other).unwrap() - Vector3::z()).norm() < 1e-12);
    }
}
