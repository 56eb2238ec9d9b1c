//! Pairwise matches, homography verification and multi-view tracks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{par, Error, Result, TrackId, ViewId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewInfo {
    pub id: ViewId,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub view: ViewId,
    pub position: Vector2<f64>,
}

/// Matches between two views as index pairs into each view's keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub view_a: ViewId,
    pub view_b: ViewId,
    pub pairs: Vec<(usize, usize)>,
    /// Verified homography mapping pixels of `view_a` to `view_b`.
    pub homography: Option<Matrix3<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct MatchGraph {
    /// Sorted by id.
    pub views: Vec<ViewInfo>,
    /// Deduplicated keypoints per view.
    pub keypoints: BTreeMap<ViewId, Vec<Vector2<f64>>>,
    pub match_sets: Vec<MatchSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: TrackId,
    /// Sorted by view id; a conflicted track holds a view more than once.
    pub observations: Vec<(ViewId, Vector2<f64>)>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_conflicted(&self) -> bool {
        self.observations.windows(2).any(|w| w[0].0 == w[1].0)
    }

    pub fn observation(&self, view: &ViewId) -> Option<Vector2<f64>> {
        self.observations.iter().find(|(v, _)| v == view).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacOptions {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        RansacOptions { threshold_px: 4.0, max_iterations: 2000, confidence: 0.999, min_inliers: 40, seed: 0 }
    }
}

// ---------------------------------------------------------------------------
// interchange format

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchFile {
    pub views: Vec<ViewInfo>,
    pub matches: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub view_a: ViewId,
    pub view_b: ViewId,
    /// `[xa, ya, xb, yb]` per match.
    pub pairs: Vec<[f64; 4]>,
}

impl MatchFile {
    pub fn to_graph(&self) -> Result<MatchGraph> {
        let mut graph = MatchGraph::default();
        let mut index: HashMap<ViewId, HashMap<(u64, u64), usize>> = HashMap::new();
        for v in &self.views {
            if v.width == 0 || v.height == 0 {
                return Err(Error::Parse(format!("view {} has an empty image size", v.id)));
            }
            if graph.keypoints.insert(v.id.clone(), Vec::new()).is_some() {
                return Err(Error::Parse(format!("view {} listed twice", v.id)));
            }
            index.insert(v.id.clone(), HashMap::new());
            graph.views.push(v.clone());
        }
        graph.views.sort_by(|a, b| a.id.cmp(&b.id));
        let sizes: HashMap<ViewId, (u32, u32)> = graph.views.iter().map(|v| (v.id.clone(), (v.width, v.height))).collect();

        let mut edges: BTreeMap<(ViewId, ViewId), Vec<(usize, usize)>> = BTreeMap::new();
        for (ri, rec) in self.matches.iter().enumerate() {
            if rec.view_a == rec.view_b {
                return Err(Error::Parse(format!("match record {ri}: view {} matched with itself", rec.view_a)));
            }
            for v in [&rec.view_a, &rec.view_b] {
                if !sizes.contains_key(v) {
                    return Err(Error::Parse(format!("match record {ri}: unknown view {v}")));
                }
            }
            // store each edge with the smaller id first
            let swap = rec.view_a > rec.view_b;
            let (va, vb) = if swap { (&rec.view_b, &rec.view_a) } else { (&rec.view_a, &rec.view_b) };
            let list = edges.entry((va.clone(), vb.clone())).or_default();
            for (pi, p) in rec.pairs.iter().enumerate() {
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Parse(format!("match record {ri}, pair {pi}: non-finite coordinate")));
                }
                let (pa, pb) = if swap {
                    (Vector2::new(p[2], p[3]), Vector2::new(p[0], p[1]))
                } else {
                    (Vector2::new(p[0], p[1]), Vector2::new(p[2], p[3]))
                };
                let mut ids = [0usize; 2];
                for (slot, (view, pos)) in [(va, pa), (vb, pb)].into_iter().enumerate() {
                    let (w, h) = sizes[view];
                    if pos.x < 0.0 || pos.y < 0.0 || pos.x >= w as f64 || pos.y >= h as f64 {
                        return Err(Error::Parse(format!(
                            "match record {ri}, pair {pi}: pixel ({}, {}) outside view {view}",
                            pos.x, pos.y
                        )));
                    }
                    let kps = graph.keypoints.get_mut(view).expect("view registered above");
                    let key = (pos.x.to_bits(), pos.y.to_bits());
                    let id = *index.get_mut(view).expect("view registered above").entry(key).or_insert_with(|| {
                        kps.push(pos);
                        kps.len() - 1
                    });
                    ids[slot] = id;
                }
                list.push((ids[0], ids[1]));
            }
        }
        // canonical keypoint order so results do not depend on record order
        let mut remap: HashMap<ViewId, Vec<usize>> = HashMap::new();
        for (view, kps) in graph.keypoints.iter_mut() {
            let mut order: Vec<usize> = (0..kps.len()).collect();
            order.sort_by(|&i, &j| kps[i].x.total_cmp(&kps[j].x).then(kps[i].y.total_cmp(&kps[j].y)));
            let mut new_index = vec![0; kps.len()];
            for (new, &old) in order.iter().enumerate() {
                new_index[old] = new;
            }
            *kps = order.iter().map(|&i| kps[i]).collect();
            remap.insert(view.clone(), new_index);
        }
        for ((a, b), pairs) in edges {
            let (ra, rb) = (&remap[&a], &remap[&b]);
            let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(i, j)| (ra[i], rb[j])).collect();
            pairs.sort_unstable();
            pairs.dedup();
            graph.match_sets.push(MatchSet { view_a: a, view_b: b, pairs, homography: None });
        }
        Ok(graph)
    }
}

/// Reads a match interchange file.
pub fn load_matches(path: &Path) -> Result<MatchGraph> {
    let text = std::fs::read_to_string(path)?;
    let file: MatchFile = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    file.to_graph()
}

impl MatchGraph {
    pub fn view(&self, id: &ViewId) -> Option<&ViewInfo> {
        self.views.binary_search_by(|v| v.id.cmp(id)).ok().map(|i| &self.views[i])
    }

    pub fn keypoint(&self, view: &ViewId, index: usize) -> Vector2<f64> {
        self.keypoints[view][index]
    }

    pub fn to_file(&self) -> MatchFile {
        let matches = self
            .match_sets
            .iter()
            .map(|m| {
                let (ka, kb) = (&self.keypoints[&m.view_a], &self.keypoints[&m.view_b]);
                let pairs = m.pairs.iter().map(|&(a, b)| [ka[a].x, ka[a].y, kb[b].x, kb[b].y]).collect();
                MatchRecord { view_a: m.view_a.clone(), view_b: m.view_b.clone(), pairs }
            })
            .collect();
        MatchFile { views: self.views.clone(), matches }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.to_file())
    }

    /// Edge weight between two views (0 when not connected).
    pub fn edge_weight(&self, a: &ViewId, b: &ViewId) -> usize {
        self.edge(a, b).map_or(0, |m| m.pairs.len())
    }

    pub fn edge(&self, a: &ViewId, b: &ViewId) -> Option<&MatchSet> {
        self.match_sets
            .iter()
            .find(|m| (&m.view_a == a && &m.view_b == b) || (&m.view_a == b && &m.view_b == a))
    }

    /// Homography mapping pixels of `from` into `to`, if the edge is verified.
    pub fn homography(&self, from: &ViewId, to: &ViewId) -> Option<Matrix3<f64>> {
        let m = self.edge(from, to)?;
        let h = m.homography?;
        if &m.view_a == from {
            Some(h)
        } else {
            h.try_inverse()
        }
    }

    /// Sum of edge weights incident to every view.
    pub fn total_weights(&self) -> BTreeMap<ViewId, usize> {
        let mut w: BTreeMap<ViewId, usize> = self.views.iter().map(|v| (v.id.clone(), 0)).collect();
        for m in &self.match_sets {
            *w.entry(m.view_a.clone()).or_default() += m.pairs.len();
            *w.entry(m.view_b.clone()).or_default() += m.pairs.len();
        }
        w
    }

    /// Neighbours of `view` with their edge weights.
    pub fn neighbors(&self, view: &ViewId) -> Vec<(ViewId, usize)> {
        let mut out: Vec<(ViewId, usize)> = self
            .match_sets
            .iter()
            .filter_map(|m| {
                if &m.view_a == view {
                    Some((m.view_b.clone(), m.pairs.len()))
                } else if &m.view_b == view {
                    Some((m.view_a.clone(), m.pairs.len()))
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    /// Runs RANSAC on every edge; edges with fewer than `min_inliers`
    /// inliers are dropped and the rest keep only their inliers.
    pub fn verify(&mut self, opts: &RansacOptions, parallel: bool) {
        let results = par::map_range(parallel, self.match_sets.len(), |i| {
            let m = &self.match_sets[i];
            let (ka, kb) = (&self.keypoints[&m.view_a], &self.keypoints[&m.view_b]);
            let pa: Vec<Vector2<f64>> = m.pairs.iter().map(|&(a, _)| ka[a]).collect();
            let pb: Vec<Vector2<f64>> = m.pairs.iter().map(|&(_, b)| kb[b]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(edge_seed(opts.seed, &m.view_a, &m.view_b));
            verify_homography(&pa, &pb, opts, &mut rng)
        });
        let sets = std::mem::take(&mut self.match_sets);
        for (mut m, res) in sets.into_iter().zip(results) {
            if let Some(v) = res {
                m.pairs = v.inliers.iter().map(|&i| m.pairs[i]).collect();
                m.homography = Some(v.homography);
                self.match_sets.push(m);
            } else {
                log::debug!("edge {}-{} discarded by verification", m.view_a, m.view_b);
            }
        }
    }
}

/// Seed of one edge's RANSAC stream; stable under edge reordering.
fn edge_seed(seed: u64, a: &ViewId, b: &ViewId) -> u64 {
    // FNV-1a over the two ids, mixed with the user seed
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for byte in a.as_str().bytes().chain([0u8]).chain(b.as_str().bytes()) {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// homography estimation

#[derive(Debug, Clone)]
pub struct VerifiedHomography {
    /// Maps points of the first set to the second.
    pub homography: Matrix3<f64>,
    /// Indices of the inlier pairs, ascending.
    pub inliers: Vec<usize>,
}

fn normalizer(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Direct linear transform with Hartley normalization, `b ~ H a`.
pub fn homography_dlt(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = a.len();
    if n < 4 || b.len() != n {
        return None;
    }
    let (ta, tb) = (normalizer(a), normalizer(b));
    // pad to at least 9 rows so the SVD returns the full right basis
    let rows = (2 * n).max(9);
    let mut m = DMatrix::zeros(rows, 9);
    for i in 0..n {
        let p = ta * Vector3::new(a[i].x, a[i].y, 1.0);
        let q = tb * Vector3::new(b[i].x, b[i].y, 1.0);
        let (x, y, w) = (p.x, p.y, p.z);
        let (u, v, s) = (q.x, q.y, q.z);
        let r0 = [0.0, 0.0, 0.0, -s * x, -s * y, -s * w, v * x, v * y, v * w];
        let r1 = [s * x, s * y, s * w, 0.0, 0.0, 0.0, -u * x, -u * y, -u * w];
        for k in 0..9 {
            m[(2 * i, k)] = r0[k];
            m[(2 * i + 1, k)] = r1[k];
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd.singular_values.argmin();
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let full = tb.try_inverse()? * hn * ta;
    let norm = full.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    let full = full / norm;
    full.try_inverse()?;
    Some(full)
}

/// `|b - H a|^2 + |a - H^-1 b|^2`.
pub fn symmetric_transfer_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let fwd = apply_h(h, a) - b;
    let bwd = apply_h(h_inv, b) - a;
    let e = fwd.norm_squared() + bwd.norm_squared();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn collinear(p: &[Vector2<f64>; 4]) -> bool {
    let scale = p.iter().map(|q| q.norm()).fold(1.0, f64::max);
    for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        let (u, v) = (p[j] - p[i], p[k] - p[i]);
        if (u.x * v.y - u.y * v.x).abs() < 1e-9 * scale * scale {
            return true;
        }
    }
    false
}

fn inliers_of(h: &Matrix3<f64>, a: &[Vector2<f64>], b: &[Vector2<f64>], t2: f64) -> Option<Vec<usize>> {
    let h_inv = h.try_inverse()?;
    Some((0..a.len()).filter(|&i| symmetric_transfer_error(h, &h_inv, &a[i], &b[i]) <= t2).collect())
}

/// RANSAC homography between matched point lists. `None` when fewer than
/// `min_inliers` pairs agree with the best model.
pub fn verify_homography(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    opts: &RansacOptions,
    rng: &mut ChaCha8Rng,
) -> Option<VerifiedHomography> {
    let n = a.len();
    if n < 4 || n < opts.min_inliers || b.len() != n {
        return None;
    }
    let t2 = opts.threshold_px * opts.threshold_px;
    let mut best: Option<(Matrix3<f64>, Vec<usize>)> = None;
    let mut needed = opts.max_iterations;
    let mut iter = 0;
    while iter < needed.min(opts.max_iterations) {
        iter += 1;
        let idx = sample(rng, n, 4);
        let sa = [a[idx.index(0)], a[idx.index(1)], a[idx.index(2)], a[idx.index(3)]];
        let sb = [b[idx.index(0)], b[idx.index(1)], b[idx.index(2)], b[idx.index(3)]];
        if collinear(&sa) || collinear(&sb) {
            continue;
        }
        let Some(h) = homography_dlt(&sa, &sb) else { continue };
        let Some(inl) = inliers_of(&h, a, b, t2) else { continue };
        if best.as_ref().is_none_or(|(_, bi)| inl.len() > bi.len()) {
            let w = inl.len() as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            needed = if denom < 0.0 {
                ((1.0 - opts.confidence).ln() / denom).ceil().max(1.0) as usize
            } else {
                opts.max_iterations
            };
            best = Some((h, inl));
        }
    }
    let (mut h, mut inl) = best?;
    // least-squares refit on the consensus set while it keeps growing
    for _ in 0..5 {
        let ia: Vec<Vector2<f64>> = inl.iter().map(|&i| a[i]).collect();
        let ib: Vec<Vector2<f64>> = inl.iter().map(|&i| b[i]).collect();
        let Some(h2) = homography_dlt(&ia, &ib) else { break };
        let Some(inl2) = inliers_of(&h2, a, b, t2) else { break };
        if inl2.len() < inl.len() {
            break;
        }
        let grew = inl2.len() > inl.len();
        h = h2;
        inl = inl2;
        if !grew {
            break;
        }
    }
    (inl.len() >= opts.min_inliers).then_some(VerifiedHomography { homography: h, inliers: inl })
}

// ---------------------------------------------------------------------------
// tracks

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the keypoint match relation. Only keypoints that
/// take part in at least one match appear. Track ids follow the order of
/// each component's first keypoint (views by id, then keypoint index).
pub fn build_tracks(graph: &MatchGraph) -> Vec<Track> {
    let mut offsets: BTreeMap<&ViewId, usize> = BTreeMap::new();
    let mut owners: Vec<(&ViewId, usize)> = Vec::new();
    for (view, kps) in &graph.keypoints {
        offsets.insert(view, owners.len());
        owners.extend((0..kps.len()).map(|i| (view, i)));
    }
    let mut uf = UnionFind::new(owners.len());
    let mut used = vec![false; owners.len()];
    for m in &graph.match_sets {
        let (oa, ob) = (offsets[&m.view_a], offsets[&m.view_b]);
        for &(ia, ib) in &m.pairs {
            uf.union(oa + ia, ob + ib);
            used[oa + ia] = true;
            used[ob + ib] = true;
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut first_of_root: HashMap<usize, usize> = HashMap::new();
    for g in (0..owners.len()).filter(|&g| used[g]) {
        let root = uf.find(g);
        let first = *first_of_root.entry(root).or_insert(g);
        components.entry(first).or_default().push(g);
    }
    components
        .into_values()
        .enumerate()
        .map(|(id, members)| {
            let observations = members
                .into_iter()
                .map(|g| {
                    let (view, i) = owners[g];
                    (view.clone(), graph.keypoints[view][i])
                })
                .collect();
            Track { id, observations }
        })
        .collect()
}

/// Drops conflicted tracks and tracks shorter than `min_track_len`.
pub fn filter_tracks(tracks: Vec<Track>, min_track_len: usize) -> Vec<Track> {
    tracks.into_iter().filter(|t| !t.is_conflicted() && t.len() >= min_track_len).collect()
}
