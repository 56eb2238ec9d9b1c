//! Incremental bundle adjustment over ray landmarks.
//!
//! The loop seeds from the best-connected view and its strongest neighbour,
//! then registers one view at a time against the current landmarks, averages
//! newly observed tracks into rays and runs a global adjustment whenever the
//! number of registered views has grown by a fixed factor.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::correspondence::{MatchGraph, Track};
use crate::geometry::{pixel_to_ray, rotation_from_homography, Intrinsics, RayLandmark, ViewParams, DISTORTION_BOUNDS, EPS_Z};
use crate::residuals::RayReprojection;
use crate::solver::{self, quat_from_slice, quat_to_array, BlockId, Loss, Manifold, Problem, SolveReport, SolverOptions};
use crate::{Error, Result, TrackId, ViewId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IbaConfig {
    pub ba_growth_factor: f64,
    pub max_register_attempts: usize,
    pub min_inlier_landmarks: usize,
    pub focal_init_multiplier: f64,
    pub min_track_len: usize,
    /// Largest angle (degrees) between a contributing ray and the averaged ray.
    pub max_ray_angle_deg: f64,
    pub huber_delta_px: f64,
    /// Observations beyond this multiple of the Huber threshold are outliers.
    pub outlier_factor: f64,
    /// One distortion set for every view instead of one per view.
    pub share_distortion: bool,
    pub solver: SolverOptions,
}

impl Default for IbaConfig {
    fn default() -> Self {
        IbaConfig {
            ba_growth_factor: 1.3,
            max_register_attempts: 3,
            min_inlier_landmarks: 12,
            focal_init_multiplier: 1.2,
            min_track_len: 2,
            max_ray_angle_deg: 2.0,
            huber_delta_px: 4.0,
            outlier_factor: 3.0,
            share_distortion: false,
            solver: SolverOptions::default(),
        }
    }
}

impl IbaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ba_growth_factor > 1.0) {
            return Err(Error::InvalidInput("ba_growth_factor must exceed 1".into()));
        }
        if self.max_register_attempts == 0 {
            return Err(Error::InvalidInput("max_register_attempts must be at least 1".into()));
        }
        if self.min_track_len < 2 {
            return Err(Error::InvalidInput("min_track_len must be at least 2".into()));
        }
        if !(self.huber_delta_px > 0.0) || !(self.focal_init_multiplier > 0.0) {
            return Err(Error::InvalidInput("huber_delta_px and focal_init_multiplier must be positive".into()));
        }
        Ok(())
    }

    fn outlier_px(&self) -> f64 {
        self.outlier_factor * self.huber_delta_px
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEvent {
    pub view_id: ViewId,
    pub success: bool,
    pub inliers: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaLogEntry {
    pub registered: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub pruned_landmarks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    pub views: BTreeMap<ViewId, ViewParams>,
    pub landmarks: BTreeMap<TrackId, RayLandmark>,
    /// In registration order; the first entry is the gauge view.
    pub registered: Vec<ViewId>,
    pub failed_attempts: BTreeMap<ViewId, usize>,
    /// Candidate tracks (conflict-free, long enough).
    pub tracks: BTreeMap<TrackId, Track>,
    /// Tracks removed as outliers; never triangulated again.
    pub rejected: BTreeSet<TrackId>,
    pub registration_log: Vec<RegistrationEvent>,
    pub ba_log: Vec<BaLogEntry>,
}

impl Reconstruction {
    pub fn is_registered(&self, view: &ViewId) -> bool {
        self.views.contains_key(view)
    }

    /// Observations of `track` in registered views.
    pub fn registered_observations<'a>(&'a self, track: &'a Track) -> impl Iterator<Item = (&'a ViewId, Vector2<f64>)> + 'a {
        track.observations.iter().filter(|(v, _)| self.views.contains_key(v)).map(|(v, p)| (v, *p))
    }

    /// Landmark observations per registered view, sorted by track id.
    pub fn view_observations(&self) -> BTreeMap<ViewId, Vec<(TrackId, Vector2<f64>)>> {
        let mut out: BTreeMap<ViewId, Vec<(TrackId, Vector2<f64>)>> =
            self.views.keys().map(|v| (v.clone(), Vec::new())).collect();
        for id in self.landmarks.keys() {
            for (v, p) in self.registered_observations(&self.tracks[id]) {
                out.get_mut(v).expect("registered").push((*id, p));
            }
        }
        out
    }

    /// Checks the structural invariants of a reconstruction.
    pub fn validate(&self, min_track_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Reconstruction(m));
        if self.registered.len() != self.views.len() || self.registered.iter().any(|v| !self.views.contains_key(v)) {
            return fail("registered list and view map disagree".into());
        }
        for (id, v) in &self.views {
            if v.pose.center != Vector3::zeros() {
                return fail(format!("view {id} has a non-zero center"));
            }
            if (v.pose.rotation.as_ref().norm() - 1.0).abs() > 1e-9 {
                return fail(format!("view {id} rotation is not unit norm"));
            }
            if !(v.intrinsics.f > 0.0) {
                return fail(format!("view {id} has a non-positive focal length"));
            }
        }
        let mut seen: BTreeMap<&ViewId, usize> = BTreeMap::new();
        for (id, l) in &self.landmarks {
            if (l.dir.norm() - 1.0).abs() > 1e-9 {
                return fail(format!("landmark {id} is not unit norm"));
            }
            let Some(track) = self.tracks.get(id) else {
                return fail(format!("landmark {id} has no track"));
            };
            let n = self.registered_observations(track).map(|(v, _)| *seen.entry(v).or_default() += 1).count();
            if n < min_track_len {
                return fail(format!("landmark {id} seen by {n} registered views"));
            }
        }
        if self.views.len() > 1 {
            for id in self.views.keys() {
                if !seen.contains_key(id) {
                    return fail(format!("view {id} observes no landmark"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// view selection

/// View with the largest total inlier count over its edges, ignoring
/// `exclude`. Ties go to the smallest id.
pub fn select_initial_frame(graph: &MatchGraph, exclude: &BTreeSet<ViewId>) -> Result<ViewId> {
    graph
        .total_weights()
        .into_iter()
        .filter(|(v, w)| !exclude.contains(v) && *w > 0)
        .fold(None::<(ViewId, usize)>, |best, (v, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((v, w)),
        })
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Reconstruction("no connected view left to seed from".into()))
}

/// Unregistered view with the most matches into the registered set.
pub fn next_best_view(
    recon: &Reconstruction,
    graph: &MatchGraph,
    max_attempts: usize,
    blocked: &BTreeSet<ViewId>,
) -> Option<ViewId> {
    let mut score: BTreeMap<&ViewId, usize> = BTreeMap::new();
    for m in &graph.match_sets {
        let (ra, rb) = (recon.is_registered(&m.view_a), recon.is_registered(&m.view_b));
        if ra != rb {
            let other = if ra { &m.view_b } else { &m.view_a };
            *score.entry(other).or_default() += m.pairs.len();
        }
    }
    score
        .into_iter()
        .filter(|(v, _)| {
            !blocked.contains(*v) && recon.failed_attempts.get(*v).copied().unwrap_or(0) < max_attempts
        })
        .fold(None::<(&ViewId, usize)>, |best, (v, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((v, w)),
        })
        .map(|(v, _)| v.clone())
}

// ---------------------------------------------------------------------------
// shared problem plumbing

#[derive(Debug, Clone, Copy)]
pub(crate) struct ViewBlocks {
    pub rotation: BlockId,
    pub focal: BlockId,
    pub distortion: BlockId,
}

pub(crate) fn focal_bounds(intr: &Intrinsics) -> (f64, f64) {
    (0.05 * intr.max_dim(), 20.0 * intr.max_dim())
}

/// Adds rotation, focal and (unless `shared` is given) distortion blocks.
pub(crate) fn add_view_blocks(problem: &mut Problem, view: &ViewParams, shared: Option<BlockId>) -> ViewBlocks {
    let rotation = problem.add_parameter_block(quat_to_array(&view.pose.rotation).to_vec(), Manifold::Rotation);
    let focal = problem.add_parameter_block(vec![view.intrinsics.f], Manifold::Euclidean);
    let (lo, hi) = focal_bounds(&view.intrinsics);
    problem.set_bounds(focal, vec![(lo, hi)]);
    let distortion = shared.unwrap_or_else(|| add_distortion_block(problem, &view.intrinsics));
    ViewBlocks { rotation, focal, distortion }
}

pub(crate) fn add_distortion_block(problem: &mut Problem, intr: &Intrinsics) -> BlockId {
    let b = problem.add_parameter_block(intr.distortion().to_vec(), Manifold::Euclidean);
    problem.set_bounds(b, DISTORTION_BOUNDS.to_vec());
    b
}

pub(crate) fn read_view_blocks(problem: &Problem, blocks: &ViewBlocks, view: &mut ViewParams) {
    view.pose.rotation = quat_from_slice(problem.values(blocks.rotation));
    view.intrinsics.f = problem.values(blocks.focal)[0];
    let d = problem.values(blocks.distortion);
    view.intrinsics.set_distortion([d[0], d[1], d[2], d[3]]);
}

pub(crate) fn ray_cost(view: &ViewParams, pixel: Vector2<f64>) -> Box<RayReprojection> {
    Box::new(RayReprojection { observed: pixel, cx: view.intrinsics.cx, cy: view.intrinsics.cy })
}

/// Whether a ray lies in front of the camera.
pub(crate) fn in_front(view: &ViewParams, dir: &Vector3<f64>) -> bool {
    (view.pose.rotation * dir).z > EPS_Z
}

/// Reprojection error of a ray in a view, infinite when not projectable.
pub(crate) fn reprojection_error(view: &ViewParams, dir: &Vector3<f64>, pixel: &Vector2<f64>) -> f64 {
    match crate::geometry::project_ray(view, &RayLandmark { dir: *dir }) {
        Ok(p) => (p - pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

// ---------------------------------------------------------------------------
// single-view solve (registration and online localization)

#[derive(Debug, Clone)]
pub struct ViewSolve {
    pub params: ViewParams,
    /// Observations with reprojection error below the Huber threshold.
    pub inliers: usize,
    pub report: SolveReport,
}

/// Fits one view's rotation, focal and distortion to fixed rays. Outliers
/// beyond `outlier_px` after a first solve are dropped and the view solved
/// again. Distortion stays at its initial value when `fix_distortion` is set.
pub fn solve_view(
    init: &ViewParams,
    observations: &[(Vector3<f64>, Vector2<f64>)],
    huber_delta_px: f64,
    outlier_px: f64,
    fix_distortion: bool,
    opts: &SolverOptions,
) -> Result<ViewSolve> {
    let mut params = *init;
    let mut active: Vec<&(Vector3<f64>, Vector2<f64>)> =
        observations.iter().filter(|(r, _)| in_front(&params, r)).collect();
    let mut report = None;
    for round in 0..2 {
        if active.len() < 4 {
            return Err(Error::Degenerate(format!("only {} usable observations", active.len())));
        }
        let mut problem = Problem::new();
        let blocks = add_view_blocks(&mut problem, &params, None);
        problem.set_fixed(blocks.distortion, fix_distortion);
        for (ray, px) in &active {
            let r = problem.add_parameter_block(ray.as_slice().to_vec(), Manifold::UnitVector);
            problem.set_fixed(r, true);
            problem.add_residual_block(
                ray_cost(&params, *px),
                Loss::Huber(huber_delta_px),
                vec![blocks.rotation, blocks.focal, blocks.distortion, r],
            );
        }
        let rep = solver::solve(&mut problem, opts);
        if rep.termination == solver::Termination::Failure {
            return Err(Error::Degenerate("view solve failed".into()));
        }
        read_view_blocks(&problem, &blocks, &mut params);
        report = Some(rep);
        if round == 0 {
            let before = active.len();
            active.retain(|(r, px)| reprojection_error(&params, r, px) <= outlier_px);
            if active.len() == before {
                break;
            }
        }
    }
    let inliers = observations.iter().filter(|(r, px)| reprojection_error(&params, r, px) < huber_delta_px).count();
    Ok(ViewSolve { params, inliers, report: report.expect("at least one round") })
}

/// Focal length of view `j` implied by `h` (pixels of `j` into view `i`)
/// given view `i`'s intrinsics. `None` when the homography is inconsistent
/// with a pure rotation.
pub fn focal_from_homography(k_i: &Intrinsics, h_ij: &Matrix3<f64>, width_j: u32, height_j: u32) -> Option<f64> {
    // K_i^-1 H C_j = s R diag(1/f, 1/f, 1), with C_j the principal-point shift
    let c = Matrix3::new(1.0, 0.0, width_j as f64 / 2.0, 0.0, 1.0, height_j as f64 / 2.0, 0.0, 0.0, 1.0);
    let b = k_i.k_inverse() * h_ij * c;
    let (n1, n2, n3) = (b.column(0).norm(), b.column(1).norm(), b.column(2).norm());
    let f = n3 / ((n1 * n1 + n2 * n2) / 2.0).sqrt();
    (f.is_finite() && f > 0.0).then_some(f)
}

// ---------------------------------------------------------------------------
// triangulation

/// Averages unit rays into a landmark. Fails on a near-zero mean and, when
/// `max_angle` (radians) is given, when any ray deviates further from the mean.
pub fn triangulate_rays(rays: &[Vector3<f64>], max_angle: Option<f64>) -> Result<RayLandmark> {
    if rays.is_empty() {
        return Err(Error::Degenerate("no rays to triangulate".into()));
    }
    let sum: Vector3<f64> = rays.iter().map(|r| r.normalize()).sum();
    if sum.norm() < 1e-6 * rays.len() as f64 {
        return Err(Error::Degenerate("rays cancel out".into()));
    }
    let mean = sum.normalize();
    if let Some(limit) = max_angle {
        let cos_limit = limit.cos();
        if rays.iter().any(|r| r.normalize().dot(&mean) < cos_limit) {
            return Err(Error::Degenerate("inconsistent rays".into()));
        }
    }
    Ok(RayLandmark { dir: mean })
}

/// Triangulates every track that has enough registered observations but no
/// landmark yet. Returns the number of new landmarks.
fn triangulate_new(recon: &mut Reconstruction, cfg: &IbaConfig, max_angle: Option<f64>) -> usize {
    let mut added = 0;
    let candidates: Vec<TrackId> = recon
        .tracks
        .keys()
        .filter(|id| !recon.landmarks.contains_key(id) && !recon.rejected.contains(id))
        .copied()
        .collect();
    for id in candidates {
        let track = &recon.tracks[&id];
        let rays: Vec<Vector3<f64>> = recon
            .registered_observations(track)
            .filter_map(|(v, px)| pixel_to_ray(&recon.views[v], &px).ok().map(|r| r.dir))
            .collect();
        if rays.len() < cfg.min_track_len {
            continue;
        }
        if let Ok(l) = triangulate_rays(&rays, max_angle) {
            recon.landmarks.insert(id, l);
            added += 1;
        }
    }
    added
}

// ---------------------------------------------------------------------------
// bundle adjustment

/// Bundle adjustment problem over a reconstruction, before solving.
pub(crate) struct BaProblem {
    pub problem: Problem,
    pub view_blocks: BTreeMap<ViewId, ViewBlocks>,
    landmark_blocks: Vec<(TrackId, BlockId)>,
    /// Landmarks left with too few usable observations.
    dropped: Vec<TrackId>,
}

/// Builds the joint problem over all registered views and landmarks. The
/// first registered view's rotation is held fixed.
pub(crate) fn build_ba_problem(recon: &Reconstruction, cfg: &IbaConfig) -> BaProblem {
    let mut problem = Problem::new();
    let shared_distortion =
        cfg.share_distortion.then(|| add_distortion_block(&mut problem, &recon.views[&recon.registered[0]].intrinsics));
    let mut view_blocks: BTreeMap<ViewId, ViewBlocks> = BTreeMap::new();
    for id in &recon.registered {
        let b = add_view_blocks(&mut problem, &recon.views[id], shared_distortion);
        view_blocks.insert(id.clone(), b);
    }
    problem.set_fixed(view_blocks[&recon.registered[0]].rotation, true);

    let mut landmark_blocks = Vec::new();
    let mut dropped = Vec::new();
    for (id, l) in &recon.landmarks {
        let obs: Vec<(&ViewId, Vector2<f64>)> = recon
            .registered_observations(&recon.tracks[id])
            .filter(|(v, _)| in_front(&recon.views[*v], &l.dir))
            .collect();
        if obs.len() < cfg.min_track_len {
            dropped.push(*id);
            continue;
        }
        let lb = problem.add_parameter_block(l.dir.as_slice().to_vec(), Manifold::UnitVector);
        problem.set_eliminate(lb, true);
        for (v, px) in obs {
            let b = view_blocks[v];
            problem.add_residual_block(
                ray_cost(&recon.views[v], px),
                Loss::Huber(cfg.huber_delta_px),
                vec![b.rotation, b.focal, b.distortion, lb],
            );
        }
        landmark_blocks.push((*id, lb));
    }
    BaProblem { problem, view_blocks, landmark_blocks, dropped }
}

impl BaProblem {
    /// Copies the solution back and prunes outlier landmarks. Returns the
    /// number of landmarks removed.
    pub(crate) fn apply(&self, recon: &mut Reconstruction, cfg: &IbaConfig) -> Result<usize> {
        for (id, b) in &self.view_blocks {
            read_view_blocks(&self.problem, b, recon.views.get_mut(id).expect("registered"));
        }
        for (id, lb) in &self.landmark_blocks {
            let v = self.problem.values(*lb);
            recon.landmarks.insert(*id, RayLandmark::new(Vector3::new(v[0], v[1], v[2]))?);
        }
        for id in &self.dropped {
            recon.landmarks.remove(id);
            recon.rejected.insert(*id);
        }
        Ok(prune_outliers(recon, cfg) + self.dropped.len())
    }
}

/// Joint refinement of every registered view and landmark. The first
/// registered view's rotation is held fixed. Landmarks with an observation
/// beyond the outlier threshold afterwards are removed permanently.
pub fn global_bundle_adjust(recon: &mut Reconstruction, cfg: &IbaConfig) -> Result<SolveReport> {
    if recon.registered.len() < 2 {
        return Err(Error::Reconstruction("bundle adjustment needs two registered views".into()));
    }
    let mut ba = build_ba_problem(recon, cfg);
    let report = solver::solve(&mut ba.problem, &cfg.solver);
    if report.termination == solver::Termination::Failure {
        return Err(Error::Reconstruction("global bundle adjustment failed".into()));
    }
    let pruned = ba.apply(recon, cfg)?;
    recon.ba_log.push(BaLogEntry {
        registered: recon.registered.len(),
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        iterations: report.iterations,
        pruned_landmarks: pruned,
    });
    Ok(report)
}

pub(crate) fn prune_outliers(recon: &mut Reconstruction, cfg: &IbaConfig) -> usize {
    let limit = cfg.outlier_px();
    let bad: Vec<TrackId> = recon
        .landmarks
        .iter()
        .filter(|(id, l)| {
            recon
                .registered_observations(&recon.tracks[id])
                .any(|(v, px)| reprojection_error(&recon.views[v], &l.dir, &px) > limit)
        })
        .map(|(id, _)| *id)
        .collect();
    for id in &bad {
        recon.landmarks.remove(id);
        recon.rejected.insert(*id);
    }
    bad.len()
}

// ---------------------------------------------------------------------------
// initialization and registration

fn new_intrinsics(graph: &MatchGraph, view: &ViewId, cfg: &IbaConfig) -> Result<Intrinsics> {
    let info = graph.view(view).ok_or_else(|| Error::UnknownView(view.clone()))?;
    let max_dim = info.width.max(info.height) as f64;
    Ok(Intrinsics::new(cfg.focal_init_multiplier * max_dim, info.width, info.height))
}

/// Strongest neighbour of `view`, optionally restricted to registered views.
fn best_neighbor(graph: &MatchGraph, view: &ViewId, registered_only: Option<&Reconstruction>) -> Option<ViewId> {
    graph
        .neighbors(view)
        .into_iter()
        .filter(|(v, _)| registered_only.is_none_or(|r| r.is_registered(v)))
        .fold(None::<(ViewId, usize)>, |best, (v, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((v, w)),
        })
        .map(|(v, _)| v)
}

/// Seeds a reconstruction from two views sharing a verified edge.
pub fn initialize_pair(
    graph: &MatchGraph,
    tracks: &BTreeMap<TrackId, Track>,
    frame0: &ViewId,
    frame1: &ViewId,
    cfg: &IbaConfig,
) -> Result<Reconstruction> {
    let fail = |reason: &str| Error::Registration { view: frame1.clone(), reason: reason.into() };
    let h10 = graph.homography(frame0, frame1).ok_or_else(|| fail("no verified edge to the seed view"))?;
    let k0 = new_intrinsics(graph, frame0, cfg)?;
    let k1 = new_intrinsics(graph, frame1, cfg)?;
    let r1 = rotation_from_homography(&k1, &h10, &k0)?;

    let mut recon = Reconstruction { tracks: tracks.clone(), ..Default::default() };
    recon.views.insert(frame0.clone(), ViewParams::new(k0, UnitQuaternion::identity()));
    recon.views.insert(frame1.clone(), ViewParams::new(k1, r1));
    recon.registered = vec![frame0.clone(), frame1.clone()];
    // the focal guess makes early rays disagree, so no angle gate here
    triangulate_new(&mut recon, cfg, None);
    if recon.landmarks.len() < cfg.min_inlier_landmarks {
        return Err(fail("too few shared tracks"));
    }
    global_bundle_adjust(&mut recon, cfg)?;
    let inliers = recon.landmarks.len();
    if inliers < cfg.min_inlier_landmarks {
        return Err(fail("too few consistent landmarks after pair adjustment"));
    }
    for v in [frame0, frame1] {
        recon.registration_log.push(RegistrationEvent {
            view_id: v.clone(),
            success: true,
            inliers,
            message: "seed pair".into(),
        });
    }
    Ok(recon)
}

/// Estimates parameters of `view` against the current landmarks.
pub fn register_image(recon: &Reconstruction, view: &ViewId, graph: &MatchGraph, cfg: &IbaConfig) -> Result<ViewSolve> {
    let fail = |reason: String| Error::Registration { view: view.clone(), reason };
    let mut observations = Vec::new();
    for (id, l) in &recon.landmarks {
        if let Some(px) = recon.tracks[id].observation(view) {
            observations.push((l.dir, px));
        }
    }
    if observations.len() < cfg.min_inlier_landmarks {
        return Err(fail(format!("{} landmark correspondences", observations.len())));
    }
    let neighbor = best_neighbor(graph, view, Some(recon)).ok_or_else(|| fail("no registered neighbour".into()))?;
    let nparams = recon.views[&neighbor];
    let info = graph.view(view).ok_or_else(|| Error::UnknownView(view.clone()))?;
    let mut intr = Intrinsics::new(nparams.intrinsics.f, info.width, info.height);
    intr.set_distortion(nparams.intrinsics.distortion());
    if let Some(h_nv) = graph.homography(view, &neighbor) {
        if let Some(f) = focal_from_homography(&nparams.intrinsics, &h_nv, info.width, info.height) {
            if f > 0.3 * nparams.intrinsics.f && f < 3.0 * nparams.intrinsics.f {
                intr.f = f;
            }
        }
    }
    let h_vn = graph.homography(&neighbor, view).ok_or_else(|| fail("edge lost its homography".into()))?;
    let r_vn = rotation_from_homography(&intr, &h_vn, &nparams.intrinsics)?;
    let init = ViewParams::new(intr, r_vn * nparams.pose.rotation);

    let solved = solve_view(&init, &observations, cfg.huber_delta_px, cfg.outlier_px(), cfg.share_distortion, &cfg.solver)
        .map_err(|e| fail(e.to_string()))?;
    if solved.inliers < cfg.min_inlier_landmarks {
        return Err(fail(format!("{} inliers after refinement", solved.inliers)));
    }
    Ok(solved)
}

/// Runs the full incremental loop on a verified match graph.
pub fn run_iba(graph: &MatchGraph, tracks: &[Track], cfg: &IbaConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    if graph.views.len() < 2 || graph.match_sets.is_empty() {
        return Err(Error::Reconstruction("need at least two views and one verified edge".into()));
    }
    let track_map: BTreeMap<TrackId, Track> = tracks.iter().map(|t| (t.id, t.clone())).collect();
    let mut excluded = BTreeSet::new();
    let mut recon = loop {
        let seed = select_initial_frame(graph, &excluded)?;
        let partner = best_neighbor(graph, &seed, None);
        match partner.map(|p| initialize_pair(graph, &track_map, &seed, &p, cfg)) {
            Some(Ok(r)) => break r,
            Some(Err(e)) => log::warn!("seed {seed} failed: {e}"),
            None => log::warn!("seed {seed} has no neighbour"),
        }
        excluded.insert(seed);
    };
    if cfg.share_distortion {
        // registrations keep the shared set fixed; start from the seed estimate
        let d = recon.views[&recon.registered[0]].intrinsics.distortion();
        for v in recon.views.values_mut() {
            v.intrinsics.set_distortion(d);
        }
    }

    let mut last_ba = recon.registered.len();
    let mut blocked = BTreeSet::new();
    while let Some(view) = next_best_view(&recon, graph, cfg.max_register_attempts, &blocked) {
        match register_image(&recon, &view, graph, cfg) {
            Ok(solved) => {
                let mut params = solved.params;
                if cfg.share_distortion {
                    params.intrinsics.set_distortion(recon.views[&recon.registered[0]].intrinsics.distortion());
                }
                recon.views.insert(view.clone(), params);
                recon.registered.push(view.clone());
                recon.registration_log.push(RegistrationEvent {
                    view_id: view.clone(),
                    success: true,
                    inliers: solved.inliers,
                    message: String::new(),
                });
                blocked.clear();
                let max_angle = cfg.max_ray_angle_deg.to_radians();
                triangulate_new(&mut recon, cfg, Some(max_angle));
                if recon.registered.len() as f64 >= cfg.ba_growth_factor * last_ba as f64 {
                    global_bundle_adjust(&mut recon, cfg)?;
                    drop_unobserved_views(&mut recon);
                    last_ba = recon.registered.len();
                }
            }
            Err(e) => {
                log::debug!("{e}");
                *recon.failed_attempts.entry(view.clone()).or_default() += 1;
                recon.registration_log.push(RegistrationEvent {
                    view_id: view.clone(),
                    success: false,
                    inliers: 0,
                    message: e.to_string(),
                });
                blocked.insert(view);
            }
        }
    }
    global_bundle_adjust(&mut recon, cfg)?;
    drop_unobserved_views(&mut recon);
    if recon.registered.len() < 2 {
        return Err(Error::Reconstruction("fewer than two views registered".into()));
    }
    Ok(recon)
}

/// Unregisters views left without any landmark after pruning.
fn drop_unobserved_views(recon: &mut Reconstruction) {
    let obs = recon.view_observations();
    let empty: Vec<ViewId> = obs.into_iter().filter(|(_, o)| o.is_empty()).map(|(v, _)| v).collect();
    for v in empty {
        if recon.registered.first() == Some(&v) {
            continue;
        }
        log::warn!("view {v} lost all landmarks and is unregistered");
        recon.views.remove(&v);
        recon.registered.retain(|r| r != &v);
        *recon.failed_attempts.entry(v).or_default() += 1;
    }
    // landmarks may now fall below the observation minimum
    let short: Vec<TrackId> = recon
        .landmarks
        .keys()
        .filter(|id| recon.registered_observations(&recon.tracks[id]).count() < 2)
        .copied()
        .collect();
    for id in short {
        recon.landmarks.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{MatchFile, MatchSet, ViewInfo};
    use crate::geometry::{project_ray, rotation_angle_between};
    use rand::{Rng, SeedableRng};

    fn weighted_graph(edges: &[(&str, &str, usize)]) -> MatchGraph {
        let mut views: BTreeSet<&str> = BTreeSet::new();
        for (a, b, _) in edges {
            views.insert(a);
            views.insert(b);
        }
        let mut g = MatchFile {
            views: views.iter().map(|v| ViewInfo { id: (*v).into(), width: 100, height: 100 }).collect(),
            matches: vec![],
        }
        .to_graph()
        .unwrap();
        for (a, b, w) in edges {
            g.match_sets.push(MatchSet { view_a: (*a).into(), view_b: (*b).into(), pairs: vec![(0, 0); *w], homography: None });
        }
        g
    }

    #[test]
    fn initial_frame_selection() {
        let g = weighted_graph(&[("A", "B", 100), ("B", "C", 50)]);
        assert_eq!(select_initial_frame(&g, &BTreeSet::new()).unwrap().as_str(), "B");
        let ex: BTreeSet<ViewId> = [ViewId::from("B")].into();
        assert_eq!(select_initial_frame(&g, &ex).unwrap().as_str(), "A");
        let g = weighted_graph(&[("B", "X", 100), ("A", "Y", 100)]);
        // A, B, X, Y all total 100: smallest id wins
        assert_eq!(select_initial_frame(&g, &BTreeSet::new()).unwrap().as_str(), "A");
        let all: BTreeSet<ViewId> = ["A", "B", "X", "Y"].iter().map(|v| ViewId::from(*v)).collect();
        assert!(select_initial_frame(&g, &all).is_err());
    }

    #[test]
    fn next_view_selection() {
        let mut recon = Reconstruction::default();
        recon.views.insert("A".into(), ViewParams::new(Intrinsics::new(100.0, 100, 100), UnitQuaternion::identity()));
        let g = weighted_graph(&[("A", "B", 80), ("A", "C", 30)]);
        assert_eq!(next_best_view(&recon, &g, 3, &BTreeSet::new()).unwrap().as_str(), "B");

        recon.views.insert("B".into(), recon.views[&ViewId::from("A")]);
        let g = weighted_graph(&[("A", "C", 30), ("B", "C", 40), ("B", "D", 60)]);
        assert_eq!(next_best_view(&recon, &g, 3, &BTreeSet::new()).unwrap().as_str(), "C");
        recon.failed_attempts.insert("C".into(), 3);
        assert_eq!(next_best_view(&recon, &g, 3, &BTreeSet::new()).unwrap().as_str(), "D");
        let blocked: BTreeSet<ViewId> = [ViewId::from("D")].into();
        assert!(next_best_view(&recon, &g, 3, &blocked).is_none());
    }

    #[test]
    fn triangulation_examples() {
        let z = Vector3::z();
        assert_eq!(triangulate_rays(&[z, z, z], Some(0.01)).unwrap().dir, z);
        let eps = 1e-9;
        let err = triangulate_rays(&[Vector3::new(1.0, 0.0, eps), Vector3::new(-1.0, 0.0, eps)], None);
        assert!(err.is_err());
        let a = Vector3::new(0.0, 0.05, 1.0).normalize();
        assert!(triangulate_rays(&[z, a], Some(1f64.to_radians())).is_err());
        assert!(triangulate_rays(&[z, a], Some(2f64.to_radians())).is_ok());
    }

    #[test]
    fn triangulation_recovers_true_direction() {
        let truth = Vector3::new(0.3, -0.2, 1.0).normalize();
        let views = [
            ViewParams::new(Intrinsics::new(1500.0, 1920, 1080).with_distortion([0.1, 0.01, 0.001, 0.0]), UnitQuaternion::identity()),
            ViewParams::new(Intrinsics::new(1300.0, 1920, 1080), UnitQuaternion::from_euler_angles(0.0, 0.1, 0.0)),
            ViewParams::new(Intrinsics::new(1800.0, 1920, 1080).with_distortion([-0.1, 0.02, 0.0, 0.003]), UnitQuaternion::from_euler_angles(0.05, -0.1, 0.02)),
        ];
        let rays: Vec<Vector3<f64>> = views
            .iter()
            .map(|v| {
                let px = project_ray(v, &RayLandmark { dir: truth }).unwrap();
                pixel_to_ray(v, &px).unwrap().dir
            })
            .collect();
        let l = triangulate_rays(&rays, Some(0.01)).unwrap();
        assert!(l.dir.angle(&truth) < 1e-9);
    }

    #[test]
    fn solve_view_recovers_noise_free_parameters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let truth = ViewParams::new(
            Intrinsics::new(1600.0, 1920, 1080).with_distortion([0.12, -0.03, 0.004, -0.002]),
            UnitQuaternion::from_euler_angles(0.1, 0.4, -0.05),
        );
        let mut obs = Vec::new();
        while obs.len() < 50 {
            let px = Vector2::new(rng.random_range(0.0..1920.0), rng.random_range(0.0..1080.0));
            obs.push((pixel_to_ray(&truth, &px).unwrap().dir, px));
        }
        let mut init = truth;
        init.intrinsics.f = 1400.0;
        init.intrinsics.set_distortion([0.0; 4]);
        init.pose.rotation = UnitQuaternion::from_euler_angles(0.11, 0.38, -0.04);
        let s = solve_view(&init, &obs, 4.0, 12.0, false, &SolverOptions::default()).unwrap();
        assert!(rotation_angle_between(&s.params.pose.rotation, &truth.pose.rotation) < 1e-6);
        assert!((s.params.intrinsics.f - 1600.0).abs() < 1e-3, "{}", s.params.intrinsics.f);
        assert_eq!(s.inliers, 50);
    }

    #[test]
    fn solve_view_rejects_tiny_sets() {
        let v = ViewParams::new(Intrinsics::new(1000.0, 1920, 1080), UnitQuaternion::identity());
        let obs = vec![(Vector3::z(), Vector2::new(960.0, 540.0)); 3];
        assert!(solve_view(&v, &obs, 4.0, 12.0, false, &SolverOptions::default()).is_err());
    }

    #[test]
    fn focal_from_rotation_homography() {
        let ki = Intrinsics::new(1500.0, 1920, 1080);
        let kj = Intrinsics::new(1234.0, 1920, 1080);
        let r = UnitQuaternion::from_euler_angles(0.05, 0.3, 0.0);
        let h = ki.k_matrix() * r.to_rotation_matrix().matrix() * kj.k_inverse() * -2.5;
        let f = focal_from_homography(&ki, &h, 1920, 1080).unwrap();
        assert!((f - 1234.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(IbaConfig::default().validate().is_ok());
        assert!(IbaConfig { ba_growth_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(IbaConfig { max_register_attempts: 0, ..Default::default() }.validate().is_err());
    }
}
