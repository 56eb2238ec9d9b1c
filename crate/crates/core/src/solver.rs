//! Damped nonlinear least squares (Levenberg-Marquardt).
//!
//! A [`Problem`] owns parameter blocks and residual blocks. Each residual
//! block evaluates its residual vector and the Jacobian with respect to the
//! *local tangent* coordinates of every parameter block it touches, so
//! rotations (3-dof) and unit rays (2-dof) are optimised minimally and
//! re-projected onto their manifold after each step.
//!
//! Blocks flagged with [`Problem::set_eliminate`] are removed by a Schur
//! complement before the damped system is solved, which is what keeps bundle
//! adjustment with thousands of landmarks cheap. Without such blocks the
//! solve is a plain dense Cholesky.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::par;

/// How a parameter block is updated by a tangent-space step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Unit quaternion `[w, x, y, z]`, updated as `q <- exp(delta) * q`.
    Rotation,
    /// Unit 3-vector, updated along the tangent plane with the sphere exp map.
    UnitVector,
}

impl Manifold {
    pub fn local_dim(self, ambient: usize) -> usize {
        match self {
            Manifold::Euclidean => ambient,
            Manifold::Rotation => 3,
            Manifold::UnitVector => 2,
        }
    }

    /// `x ⊞ delta`.
    pub fn plus(self, x: &[f64], delta: &[f64], out: &mut [f64]) {
        match self {
            Manifold::Euclidean => {
                for ((o, a), d) in out.iter_mut().zip(x).zip(delta) {
                    *o = a + d;
                }
            }
            Manifold::Rotation => {
                let q = quat_from_slice(x);
                let dq = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
                let r = (dq * q).into_inner().normalize();
                out.copy_from_slice(&[r.w, r.i, r.j, r.k]);
            }
            Manifold::UnitVector => {
                let r = Vector3::new(x[0], x[1], x[2]);
                let (b1, b2) = sphere_basis(&r);
                let v = b1 * delta[0] + b2 * delta[1];
                let theta = v.norm();
                let moved = if theta < 1e-300 { r } else { r * theta.cos() + v * (theta.sin() / theta) };
                let moved = moved.normalize();
                out.copy_from_slice(moved.as_slice());
            }
        }
    }
}

/// Unit quaternion from a `[w, x, y, z]` slice (renormalized).
pub fn quat_from_slice(x: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(x[0], x[1], x[2], x[3]))
}

pub fn quat_to_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Orthonormal basis of the tangent plane of the unit sphere at `r`.
///
/// The choice is a deterministic function of `r`; residuals that touch a
/// [`Manifold::UnitVector`] block must use the same basis for their Jacobians.
pub fn sphere_basis(r: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if r.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = (a - r * a.dot(r)).normalize();
    let b2 = r.cross(&b1);
    (b1, b2)
}

/// Robust loss functions applied to the squared residual norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Trivial,
    /// Huber with threshold `delta` on the residual norm.
    Huber(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Trivial,
    Huber,
}

/// `(rho(s), rho'(s))` for squared norm `s`.
///
/// Huber: `rho(s) = s` for `s <= delta^2`, otherwise `2 delta sqrt(s) - delta^2`.
pub fn robust_loss_eval(kind: LossKind, scale: f64, squared_norm: f64) -> (f64, f64) {
    match kind {
        LossKind::Trivial => (squared_norm, 1.0),
        LossKind::Huber => {
            let d2 = scale * scale;
            if squared_norm <= d2 {
                (squared_norm, 1.0)
            } else {
                let r = squared_norm.sqrt();
                (2.0 * scale * r - d2, scale / r)
            }
        }
    }
}

impl Loss {
    pub fn eval(self, s: f64) -> (f64, f64) {
        match self {
            Loss::Trivial => robust_loss_eval(LossKind::Trivial, 1.0, s),
            Loss::Huber(d) => robust_loss_eval(LossKind::Huber, d, s),
        }
    }
}

/// A residual function of several parameter blocks.
pub trait CostFunction: Send + Sync {
    fn num_residuals(&self) -> usize;

    /// Local (tangent) dimension expected for each parameter block.
    fn local_dims(&self) -> Vec<usize>;

    /// Writes the residuals and, when requested, one `num_residuals x
    /// local_dim` Jacobian per parameter block. Returns `false` when the
    /// residual cannot be evaluated at `params`.
    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub values: Vec<f64>,
    pub manifold: Manifold,
    pub fixed: bool,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub eliminate: bool,
}

impl ParameterBlock {
    pub fn local_dim(&self) -> usize {
        self.manifold.local_dim(self.values.len())
    }

    fn project_bounds(&mut self) {
        if let Some(b) = &self.bounds {
            for (v, (lo, hi)) in self.values.iter_mut().zip(b) {
                *v = v.clamp(*lo, *hi);
            }
        }
    }
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub loss: Loss,
    pub blocks: Vec<BlockId>,
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter_block(&mut self, values: Vec<f64>, manifold: Manifold) -> BlockId {
        self.blocks.push(ParameterBlock { values, manifold, fixed: false, bounds: None, eliminate: false });
        BlockId(self.blocks.len() - 1)
    }

    pub fn set_fixed(&mut self, id: BlockId, fixed: bool) {
        self.blocks[id.0].fixed = fixed;
    }

    pub fn set_bounds(&mut self, id: BlockId, bounds: Vec<(f64, f64)>) {
        let b = &mut self.blocks[id.0];
        assert_eq!(b.manifold, Manifold::Euclidean, "bounds only apply to euclidean blocks");
        assert_eq!(bounds.len(), b.values.len());
        b.bounds = Some(bounds);
        b.project_bounds();
    }

    /// Marks a block for Schur elimination. Every residual may touch at most
    /// one eliminated block, otherwise the solver falls back to dense.
    pub fn set_eliminate(&mut self, id: BlockId, eliminate: bool) {
        self.blocks[id.0].eliminate = eliminate;
    }

    pub fn add_residual_block(&mut self, cost: Box<dyn CostFunction>, loss: Loss, blocks: Vec<BlockId>) {
        let dims = cost.local_dims();
        assert_eq!(dims.len(), blocks.len(), "parameter count mismatch");
        for (d, b) in dims.iter().zip(&blocks) {
            assert_eq!(*d, self.blocks[b.0].local_dim(), "local dimension mismatch");
        }
        self.residuals.push(ResidualBlock { cost, loss, blocks });
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].values
    }

    pub fn block(&self, id: BlockId) -> &ParameterBlock {
        &self.blocks[id.0]
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    /// Total robustified cost `1/2 sum rho(|r|^2)` at the current values.
    pub fn cost(&self) -> Option<f64> {
        total_cost(self, false)
    }

    /// Unrobustified residual of one block at the current values.
    pub fn residual(&self, index: usize) -> Option<Vec<f64>> {
        let rb = &self.residuals[index];
        let params: Vec<&[f64]> = rb.blocks.iter().map(|b| self.blocks[b.0].values.as_slice()).collect();
        let mut r = vec![0.0; rb.cost.num_residuals()];
        rb.cost.evaluate(&params, &mut r, None).then_some(r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub function_tolerance: f64,
    /// Stop when the max-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Stop when `|step| <= tol * (|x| + tol)`.
    pub parameter_tolerance: f64,
    pub initial_damping: f64,
    /// Huber threshold (pixels) for reprojection residuals built by callers.
    pub huber_delta_px: f64,
    /// Use Schur elimination when the problem allows it.
    pub use_schur: bool,
    pub parallel: bool,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 100,
            function_tolerance: 1e-10,
            gradient_tolerance: 1e-12,
            parameter_tolerance: 1e-10,
            initial_damping: 1e-4,
            huber_delta_px: 4.0,
            use_schur: true,
            parallel: true,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Failure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl SolveReport {
    fn failure(cost: f64) -> Self {
        SolveReport {
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
            termination: Termination::Failure,
            cost_history: vec![cost],
        }
    }
}

struct Evaluated {
    residuals: Vec<f64>,
    jacobians: Vec<DMatrix<f64>>,
}

fn gather<'a>(blocks: &'a [ParameterBlock], ids: &[BlockId]) -> Vec<&'a [f64]> {
    ids.iter().map(|b| blocks[b.0].values.as_slice()).collect()
}

fn total_cost(problem: &Problem, parallel: bool) -> Option<f64> {
    let parts = par::map(parallel, &problem.residuals, |rb| {
        let params = gather(&problem.blocks, &rb.blocks);
        let mut r = vec![0.0; rb.cost.num_residuals()];
        if !rb.cost.evaluate(&params, &mut r, None) {
            return None;
        }
        let s: f64 = r.iter().map(|v| v * v).sum();
        let rho = rb.loss.eval(s).0;
        rho.is_finite().then_some(0.5 * rho)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Some(total)
}

/// Where each free block lives in the linear system.
#[derive(Clone, Copy)]
enum Slot {
    Fixed,
    /// Offset into the reduced (non-eliminated) system.
    Reduced(usize),
    /// Index of the eliminated block.
    Eliminated(usize),
}

struct Layout {
    slots: Vec<Slot>,
    reduced_dim: usize,
    /// (block index, local dim) per eliminated block.
    eliminated: Vec<(usize, usize)>,
}

impl Layout {
    fn new(problem: &Problem, use_schur: bool) -> Self {
        let mut schur = use_schur;
        if schur {
            for rb in &problem.residuals {
                let n = rb.blocks.iter().filter(|b| {
                    let blk = &problem.blocks[b.0];
                    blk.eliminate && !blk.fixed
                });
                if n.count() > 1 {
                    schur = false;
                    break;
                }
            }
        }
        let mut slots = Vec::with_capacity(problem.blocks.len());
        let mut reduced_dim = 0;
        let mut eliminated = Vec::new();
        for (i, b) in problem.blocks.iter().enumerate() {
            if b.fixed {
                slots.push(Slot::Fixed);
            } else if schur && b.eliminate {
                slots.push(Slot::Eliminated(eliminated.len()));
                eliminated.push((i, b.local_dim()));
            } else {
                slots.push(Slot::Reduced(reduced_dim));
                reduced_dim += b.local_dim();
            }
        }
        Layout { slots, reduced_dim, eliminated }
    }

    fn total_dim(&self) -> usize {
        self.reduced_dim + self.eliminated.iter().map(|e| e.1).sum::<usize>()
    }
}

/// Normal equations split into the reduced part and eliminated blocks.
struct Normal {
    h_rr: DMatrix<f64>,
    g_r: DVector<f64>,
    h_ee: Vec<DMatrix<f64>>,
    g_e: Vec<DVector<f64>>,
    /// Per eliminated block: reduced-system offsets it couples to and the
    /// stacked coupling block `H_re` (rows follow `coupled_offsets`).
    coupled: Vec<Vec<(usize, usize)>>,
    h_re: Vec<DMatrix<f64>>,
}

impl Normal {
    fn gradient_max_norm(&self) -> f64 {
        let mut m = self.g_r.amax();
        for g in &self.g_e {
            m = m.max(g.amax());
        }
        m
    }
}

fn linearize(problem: &Problem, layout: &Layout, parallel: bool) -> Option<(f64, Normal)> {
    let evals: Vec<Option<Evaluated>> = par::map(parallel, &problem.residuals, |rb| {
        let params = gather(&problem.blocks, &rb.blocks);
        let m = rb.cost.num_residuals();
        let mut residuals = vec![0.0; m];
        let mut jacobians: Vec<DMatrix<f64>> =
            rb.blocks.iter().map(|b| DMatrix::zeros(m, problem.blocks[b.0].local_dim())).collect();
        if !rb.cost.evaluate(&params, &mut residuals, Some(&mut jacobians)) {
            return None;
        }
        if residuals.iter().any(|v| !v.is_finite()) || jacobians.iter().any(|j| j.iter().any(|v| !v.is_finite())) {
            return None;
        }
        Some(Evaluated { residuals, jacobians })
    });

    let ne = layout.eliminated.len();
    let mut normal = Normal {
        h_rr: DMatrix::zeros(layout.reduced_dim, layout.reduced_dim),
        g_r: DVector::zeros(layout.reduced_dim),
        h_ee: layout.eliminated.iter().map(|&(_, d)| DMatrix::zeros(d, d)).collect(),
        g_e: layout.eliminated.iter().map(|&(_, d)| DVector::zeros(d)).collect(),
        coupled: vec![Vec::new(); ne],
        h_re: Vec::with_capacity(ne),
    };
    // coupling blocks are accumulated per (eliminated, reduced block) pair
    let mut couplings: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); ne];

    let mut cost = 0.0;
    for (rb, ev) in problem.residuals.iter().zip(evals) {
        let mut ev = ev?;
        let s: f64 = ev.residuals.iter().map(|v| v * v).sum();
        let (rho, drho) = rb.loss.eval(s);
        cost += 0.5 * rho;
        let w = drho.sqrt();
        if w != 1.0 {
            for v in ev.residuals.iter_mut() {
                *v *= w;
            }
            for j in ev.jacobians.iter_mut() {
                *j *= w;
            }
        }
        let r = DVector::from_vec(ev.residuals);
        let mut elim: Option<(usize, &DMatrix<f64>)> = None;
        for (k, b) in rb.blocks.iter().enumerate() {
            if let Slot::Eliminated(e) = layout.slots[b.0] {
                elim = Some((e, &ev.jacobians[k]));
            }
        }
        for (ka, ba) in rb.blocks.iter().enumerate() {
            let Slot::Reduced(oa) = layout.slots[ba.0] else { continue };
            let ja = &ev.jacobians[ka];
            let da = ja.ncols();
            let mut g = normal.g_r.rows_mut(oa, da);
            g += ja.transpose() * &r;
            for (kb, bb) in rb.blocks.iter().enumerate() {
                let Slot::Reduced(ob) = layout.slots[bb.0] else { continue };
                let jb = &ev.jacobians[kb];
                let mut h = normal.h_rr.view_mut((oa, ob), (da, jb.ncols()));
                h += ja.transpose() * jb;
            }
            if let Some((e, je)) = elim {
                let c = ja.transpose() * je;
                match couplings[e].iter_mut().find(|(o, _)| *o == oa) {
                    Some((_, acc)) => *acc += c,
                    None => couplings[e].push((oa, c)),
                }
            }
        }
        if let Some((e, je)) = elim {
            normal.h_ee[e] += je.transpose() * je;
            normal.g_e[e] += je.transpose() * &r;
        }
    }

    for (e, mut list) in couplings.into_iter().enumerate() {
        list.sort_by_key(|(o, _)| *o);
        let de = layout.eliminated[e].1;
        let rows: usize = list.iter().map(|(_, m)| m.nrows()).sum();
        let mut stacked = DMatrix::zeros(rows, de);
        let mut offsets = Vec::with_capacity(list.len());
        let mut row = 0;
        for (o, m) in list {
            stacked.view_mut((row, 0), (m.nrows(), de)).copy_from(&m);
            offsets.push((o, m.nrows()));
            row += m.nrows();
        }
        normal.coupled[e] = offsets;
        normal.h_re.push(stacked);
    }
    Some((cost, normal))
}

/// Solves the damped system. Returns the step split as (reduced, eliminated).
fn solve_damped(normal: &Normal, lambda: f64, parallel: bool) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    let n = normal.h_rr.nrows();
    let mut s = normal.h_rr.clone();
    for i in 0..n {
        s[(i, i)] += lambda;
    }
    let mut rhs = -normal.g_r.clone();

    let inverses: Vec<Option<DMatrix<f64>>> = par::map_range(parallel, normal.h_ee.len(), |e| {
        let mut h = normal.h_ee[e].clone();
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        h.cholesky().map(|c| c.inverse())
    });
    let mut inv_ee = Vec::with_capacity(inverses.len());
    for inv in inverses {
        inv_ee.push(inv?);
    }

    for (e, inv) in inv_ee.iter().enumerate() {
        let w = &normal.h_re[e];
        if w.nrows() == 0 {
            continue;
        }
        let w_inv = w * inv;
        let update = &w_inv * w.transpose();
        let rhs_update = &w_inv * &normal.g_e[e];
        // scatter the local dense blocks into the reduced system
        let coupled = &normal.coupled[e];
        let mut ra = 0;
        for &(oa, da) in coupled {
            let mut seg = rhs.rows_mut(oa, da);
            seg += rhs_update.rows(ra, da);
            let mut rb = 0;
            for &(ob, db) in coupled {
                let mut blk = s.view_mut((oa, ob), (da, db));
                blk -= update.view((ra, rb), (da, db));
                rb += db;
            }
            ra += da;
        }
    }

    let dx_r = if n > 0 {
        let chol = s.cholesky()?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };

    let dx_e = par::map_range(parallel, normal.h_ee.len(), |e| {
        // H_ee dx_e = -g_e - H_er dx_r
        let mut b = -normal.g_e[e].clone();
        let w = &normal.h_re[e];
        if w.nrows() > 0 {
            let mut local = DVector::zeros(w.nrows());
            let mut row = 0;
            for &(o, d) in &normal.coupled[e] {
                local.rows_mut(row, d).copy_from(&dx_r.rows(o, d));
                row += d;
            }
            b -= w.transpose() * local;
        }
        &inv_ee[e] * b
    });
    if dx_r.iter().chain(dx_e.iter().flat_map(|v| v.iter())).any(|v| !v.is_finite()) {
        return None;
    }
    Some((dx_r, dx_e))
}

fn apply_step(problem: &Problem, layout: &Layout, dx_r: &DVector<f64>, dx_e: &[DVector<f64>]) -> Vec<ParameterBlock> {
    let mut blocks = problem.blocks.clone();
    for (i, blk) in blocks.iter_mut().enumerate() {
        let delta: &[f64] = match layout.slots[i] {
            Slot::Fixed => continue,
            Slot::Reduced(o) => &dx_r.as_slice()[o..o + blk.local_dim()],
            Slot::Eliminated(e) => dx_e[e].as_slice(),
        };
        let mut out = vec![0.0; blk.values.len()];
        blk.manifold.plus(&blk.values, delta, &mut out);
        blk.values = out;
        blk.project_bounds();
    }
    blocks
}

fn free_parameter_norm(problem: &Problem) -> f64 {
    problem
        .blocks
        .iter()
        .filter(|b| !b.fixed)
        .flat_map(|b| b.values.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Minimizes the robustified cost of `problem` in place.
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> SolveReport {
    let layout = Layout::new(problem, opts.use_schur);
    let Some(mut cost) = total_cost(problem, opts.parallel) else {
        return SolveReport::failure(f64::NAN);
    };
    let initial_cost = cost;
    let mut history = vec![cost];
    if layout.total_dim() == 0 {
        return SolveReport {
            initial_cost,
            final_cost: cost,
            iterations: 0,
            termination: Termination::Converged,
            cost_history: history,
        };
    }

    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < opts.max_iterations {
        let Some((lin_cost, normal)) = linearize(problem, &layout, opts.parallel) else {
            termination = Termination::Failure;
            break;
        };
        debug_assert!((lin_cost - cost).abs() <= 1e-9 * cost.abs().max(1.0));
        if normal.gradient_max_norm() < opts.gradient_tolerance {
            termination = Termination::Converged;
            break;
        }
        loop {
            if iterations >= opts.max_iterations {
                break 'outer;
            }
            if lambda > 1e32 {
                // no representable step lowers the cost any further
                termination = Termination::Converged;
                break 'outer;
            }
            let Some((dx_r, dx_e)) = solve_damped(&normal, lambda, opts.parallel) else {
                lambda *= 10.0;
                iterations += 1;
                continue;
            };
            let step_norm =
                (dx_r.norm_squared() + dx_e.iter().map(|v| v.norm_squared()).sum::<f64>()).sqrt();
            let x_norm = free_parameter_norm(problem);
            if step_norm <= opts.parameter_tolerance * (x_norm + opts.parameter_tolerance) {
                termination = Termination::Converged;
                break 'outer;
            }
            let candidate = apply_step(problem, &layout, &dx_r, &dx_e);
            let old_blocks = std::mem::replace(&mut problem.blocks, candidate);
            iterations += 1;
            match total_cost(problem, opts.parallel) {
                Some(new_cost) if new_cost < cost => {
                    let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    if opts.verbose {
                        log::debug!("iter {iterations}: cost {cost:.6e} -> {new_cost:.6e}, lambda {lambda:.1e}");
                    }
                    cost = new_cost;
                    history.push(cost);
                    lambda = (lambda * 0.1).max(1e-15);
                    if decrease < opts.function_tolerance || cost == 0.0 {
                        termination = Termination::Converged;
                        break 'outer;
                    }
                    continue 'outer;
                }
                _ => {
                    problem.blocks = old_blocks;
                    lambda *= 10.0;
                }
            }
        }
    }

    SolveReport { initial_cost, final_cost: cost, iterations, termination, cost_history: history }
}

/// Compares the analytic Jacobian of `cost` at `params` with central finite
/// differences taken along each block's tangent space. Returns the worst
/// entry deviation `|fd - analytic| / max(1, |analytic|)`.
pub fn check_jacobian(cost: &dyn CostFunction, params: &[Vec<f64>], manifolds: &[Manifold]) -> f64 {
    let m = cost.num_residuals();
    let dims = cost.local_dims();
    let views: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
    let mut r0 = vec![0.0; m];
    let mut analytic: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(m, d)).collect();
    if !cost.evaluate(&views, &mut r0, Some(&mut analytic)) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (b, &d) in dims.iter().enumerate() {
        for k in 0..d {
            let base = if manifolds[b] == Manifold::Euclidean { params[b][k].abs() } else { 0.0 };
            let h = 1e-6 * (1.0 + base);
            let shifted = |sign: f64| -> Option<Vec<f64>> {
                let mut delta = vec![0.0; d];
                delta[k] = sign * h;
                let mut moved = params[b].clone();
                manifolds[b].plus(&params[b], &delta, &mut moved);
                let mut all: Vec<&[f64]> = views.clone();
                all[b] = &moved;
                let mut r = vec![0.0; m];
                cost.evaluate(&all, &mut r, None).then_some(r)
            };
            let (Some(rp), Some(rm)) = (shifted(1.0), shifted(-1.0)) else {
                return f64::INFINITY;
            };
            for i in 0..m {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                let an = analytic[b][(i, k)];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// r = A x - b
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear {
        fn num_residuals(&self) -> usize {
            self.a.nrows()
        }
        fn local_dims(&self) -> Vec<usize> {
            vec![self.a.ncols()]
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> bool {
            let x = DVector::from_column_slice(p[0]);
            r.copy_from_slice((&self.a * x - &self.b).as_slice());
            if let Some(j) = j {
                j[0].copy_from(&self.a);
            }
            true
        }
    }

    struct Rosenbrock;

    impl CostFunction for Rosenbrock {
        fn num_residuals(&self) -> usize {
            2
        }
        fn local_dims(&self) -> Vec<usize> {
            vec![2]
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> bool {
            let (a, b) = (p[0][0], p[0][1]);
            r[0] = 1.0 - a;
            r[1] = 10.0 * (b - a * a);
            if let Some(j) = j {
                j[0].copy_from(&DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * a, 10.0]));
            }
            true
        }
    }

    /// Residual pulling a unit vector toward a target direction.
    struct Align {
        target: Vector3<f64>,
    }

    impl CostFunction for Align {
        fn num_residuals(&self) -> usize {
            3
        }
        fn local_dims(&self) -> Vec<usize> {
            vec![2]
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> bool {
            let v = Vector3::new(p[0][0], p[0][1], p[0][2]);
            r.copy_from_slice((v - self.target).as_slice());
            if let Some(j) = j {
                let (b1, b2) = sphere_basis(&v);
                for i in 0..3 {
                    j[0][(i, 0)] = b1[i];
                    j[0][(i, 1)] = b2[i];
                }
            }
            true
        }
    }

    fn random_linear(seed: u64, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 3.0 } else { 0.0 } + rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        (a, b)
    }

    #[test]
    fn huber_examples() {
        assert_eq!(robust_loss_eval(LossKind::Huber, 2.0, 1.0), (1.0, 1.0));
        let (rho, d) = robust_loss_eval(LossKind::Huber, 2.0, 16.0);
        assert_eq!(rho, 12.0);
        assert_eq!(d, 0.5);
        assert_eq!(robust_loss_eval(LossKind::Huber, 2.0, 0.0).0, 0.0);
        // derivative continuous at the knee
        let below = robust_loss_eval(LossKind::Huber, 2.0, 4.0).1;
        let above = robust_loss_eval(LossKind::Huber, 2.0, 4.0 + 1e-12).1;
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn linear_problem_solved_in_two_iterations() {
        let (a, b) = random_linear(11, 4);
        let exact = a.clone().lu().solve(&b).unwrap();
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0; 4], Manifold::Euclidean);
        p.add_residual_block(Box::new(Linear { a, b }), Loss::Trivial, vec![x]);
        let report = solve(&mut p, &SolverOptions::default());
        assert_eq!(report.termination, Termination::Converged);
        assert!(report.iterations <= 2, "{report:?}");
        assert!(report.final_cost < 1e-16);
        let got = DVector::from_column_slice(p.values(x));
        assert!((got - exact).norm() < 1e-8);
    }

    #[test]
    fn overdetermined_linear_matches_normal_equations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-2.0..2.0));
        let b = DVector::from_fn(12, |_, _| rng.random_range(-2.0..2.0));
        let normal = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0; 3], Manifold::Euclidean);
        p.add_residual_block(Box::new(Linear { a, b }), Loss::Trivial, vec![x]);
        solve(&mut p, &SolverOptions::default());
        let got = DVector::from_column_slice(p.values(x));
        assert!((&got - &normal).norm() <= 1e-10 * normal.norm());
    }

    /// Plain gradient descent with backtracking; slow but independent of LM.
    fn gradient_descent_rosenbrock(mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
        let f = |a: f64, b: f64| (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        for _ in 0..iters {
            let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let gb = 200.0 * (b - a * a);
            let mut t = 1e-2;
            let f0 = f(a, b);
            while f(a - t * ga, b - t * gb) > f0 - 0.5 * t * (ga * ga + gb * gb) && t > 1e-20 {
                t *= 0.5;
            }
            a -= t * ga;
            b -= t * gb;
        }
        (a, b)
    }

    #[test]
    fn rosenbrock_converges_to_one_one() {
        let (ga, gb) = gradient_descent_rosenbrock(-1.2, 1.0, 200_000);
        assert!((ga - 1.0).abs() < 1e-4 && (gb - 1.0).abs() < 1e-4, "oracle at ({ga}, {gb})");

        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![-1.2, 1.0], Manifold::Euclidean);
        p.add_residual_block(Box::new(Rosenbrock), Loss::Trivial, vec![x]);
        let report = solve(&mut p, &SolverOptions::default());
        assert_eq!(report.termination, Termination::Converged);
        let v = p.values(x);
        assert!((v[0] - 1.0).abs() < 1e-8 && (v[1] - 1.0).abs() < 1e-8, "{v:?} {report:?}");
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fixed_block_is_untouched() {
        let (a, b) = random_linear(2, 2);
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.3, -0.7], Manifold::Euclidean);
        let y = p.add_parameter_block(vec![0.123456789, 1.0 / 3.0], Manifold::Euclidean);
        p.set_fixed(y, true);
        p.add_residual_block(Box::new(Linear { a: a.clone(), b: b.clone() }), Loss::Trivial, vec![x]);
        p.add_residual_block(Box::new(Linear { a, b }), Loss::Trivial, vec![y]);
        solve(&mut p, &SolverOptions::default());
        assert_eq!(p.values(y), &[0.123456789, 1.0 / 3.0]);
    }

    #[test]
    fn bounds_are_respected() {
        // unconstrained optimum at (2, -3); box clamps the first coordinate
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![2.0, -3.0]);
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0, 0.0], Manifold::Euclidean);
        p.set_bounds(x, vec![(-1.0, 1.0), (-10.0, 10.0)]);
        p.add_residual_block(Box::new(Linear { a, b }), Loss::Trivial, vec![x]);
        solve(&mut p, &SolverOptions::default());
        let v = p.values(x);
        assert!(v[0] <= 1.0 && (v[0] - 1.0).abs() < 1e-6);
        assert!((v[1] + 3.0).abs() < 1e-6);
    }

    #[test]
    fn unit_vector_stays_normalized() {
        let target = Vector3::new(0.2, -0.5, 0.8).normalize();
        let mut p = Problem::new();
        let v = p.add_parameter_block(vec![1.0, 0.0, 0.0], Manifold::UnitVector);
        p.add_residual_block(Box::new(Align { target }), Loss::Trivial, vec![v]);
        solve(&mut p, &SolverOptions::default());
        let got = Vector3::from_column_slice(p.values(v));
        assert!((got.norm() - 1.0).abs() < 1e-12);
        assert!((got - target).norm() < 1e-8);
    }

    #[test]
    fn rotation_plus_keeps_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut q = vec![1.0, 0.0, 0.0, 0.0];
        for _ in 0..1000 {
            let d: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut out = vec![0.0; 4];
            Manifold::Rotation.plus(&q, &d, &mut out);
            q = out;
        }
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_system_does_not_crash() {
        // x0 + x1 observed only together: rank-deficient normal equations
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0, 0.0], Manifold::Euclidean);
        p.add_residual_block(Box::new(Linear { a, b }), Loss::Trivial, vec![x]);
        let report = solve(&mut p, &SolverOptions::default());
        assert_ne!(report.termination, Termination::Failure);
        let v = p.values(x);
        assert!((v[0] + v[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_start_reports_failure() {
        struct Nan;
        impl CostFunction for Nan {
            fn num_residuals(&self) -> usize {
                1
            }
            fn local_dims(&self) -> Vec<usize> {
                vec![1]
            }
            fn evaluate(&self, _: &[&[f64]], r: &mut [f64], _: Option<&mut [DMatrix<f64>]>) -> bool {
                r[0] = f64::NAN;
                true
            }
        }
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0], Manifold::Euclidean);
        p.add_residual_block(Box::new(Nan), Loss::Trivial, vec![x]);
        assert_eq!(solve(&mut p, &SolverOptions::default()).termination, Termination::Failure);
    }

    #[test]
    fn linear_jacobian_check_is_exact() {
        let (a, b) = random_linear(4, 5);
        let dev = check_jacobian(&Linear { a, b }, &[vec![0.5, -1.0, 2.0, 0.0, 3.0]], &[Manifold::Euclidean]);
        assert!(dev < 1e-9, "{dev}");
    }

    /// Two linked groups: "cameras" (euclidean) and eliminable "points".
    struct Coupled;

    impl CostFunction for Coupled {
        fn num_residuals(&self) -> usize {
            2
        }
        fn local_dims(&self) -> Vec<usize> {
            vec![2, 2]
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> bool {
            let (c, x) = (p[0], p[1]);
            r[0] = c[0] * x[0] + c[1] - 1.0;
            r[1] = (c[0] - x[1]).sin() + 0.3 * x[0] * x[1];
            if let Some(j) = j {
                let cs = (c[0] - x[1]).cos();
                j[0].copy_from(&DMatrix::from_row_slice(2, 2, &[x[0], 1.0, cs, 0.0]));
                j[1].copy_from(&DMatrix::from_row_slice(2, 2, &[c[0], 0.0, 0.3 * x[1], -cs + 0.3 * x[0]]));
            }
            true
        }
    }

    #[test]
    fn schur_and_dense_paths_agree() {
        let build = |eliminate: bool| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
            let mut p = Problem::new();
            let cams: Vec<BlockId> = (0..3)
                .map(|_| p.add_parameter_block(vec![rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5)], Manifold::Euclidean))
                .collect();
            for _ in 0..10 {
                let x = p.add_parameter_block(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], Manifold::Euclidean);
                p.set_eliminate(x, eliminate);
                for c in &cams {
                    p.add_residual_block(Box::new(Coupled), Loss::Huber(0.5), vec![*c, x]);
                }
            }
            p.set_fixed(cams[0], true);
            p
        };
        let mut dense = build(false);
        let mut schur = build(true);
        let opts = SolverOptions { max_iterations: 5, ..Default::default() };
        let rd = solve(&mut dense, &opts);
        let rs = solve(&mut schur, &opts);
        assert_eq!(rd.iterations, rs.iterations);
        for (a, b) in rd.cost_history.iter().zip(&rs.cost_history) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12), "{a} vs {b}");
        }
        for i in 0..dense.blocks.len() {
            for (a, b) in dense.blocks[i].values.iter().zip(&schur.blocks[i].values) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_are_bit_identical() {
        let run = |parallel: bool| {
            let mut p = Problem::new();
            let x = p.add_parameter_block(vec![-1.2, 1.0], Manifold::Euclidean);
            for _ in 0..50 {
                p.add_residual_block(Box::new(Rosenbrock), Loss::Huber(1.0), vec![x]);
            }
            let r = solve(&mut p, &SolverOptions { parallel, ..Default::default() });
            (p.values(x).to_vec(), r.final_cost)
        };
        assert_eq!(run(true), run(false));
    }
}
