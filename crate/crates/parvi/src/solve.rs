//! Solvers for the discrete obstacle problem, by three routes.
//!
//! All routes march backward in time from the terminal slice; each time
//! level solves a static nonlinear system over the interior nodes.
//!
//! * `solve_direct`: exact complementarity via policy iteration, treating
//!   "stop" (u = g) as one more control row of the Bellman max.
//! * `solve_penalized`: a single obstacle piece enters the equation through
//!   the smooth penalty h⁺Φ_ε(u − g) − h⁺ along a decreasing ε schedule.
//! * `solve_incremental`: pieces are adjoined one at a time; pieces already
//!   installed are enforced exactly, the newest one through its penalty.
//!
//! The per-level systems are piecewise-smooth with an M-matrix Jacobian, so
//! a damped semismooth Newton iteration converges; for purely affine
//! branches (the direct route) it reduces to policy iteration and
//! terminates finitely. A nodewise Gauss-Seidel oracle for tiny instances
//! cross-checks everything.

use std::time::Instant;

use crate::discretize::{assemble, residual, Col, DiscreteOperator, LevelRows};
use crate::error::{Error, Result};
use crate::geometry::{GridFunction, NodeClass, NodeId, SpaceTimeGrid};
use crate::linalg::{sup_diff, sup_norm, Banded};
use crate::obstacles::{compatibility_h, obstacle_field, ObstacleFamily, ObstaclePiece};
use crate::operators::BellmanOperator;

/// Solver tolerances and iteration caps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveParams {
    /// Target on the recomputed max-norm residual.
    pub tol: f64,
    /// Nodes with u − g ≤ contact_tol are reported as contact.
    pub contact_tol: f64,
    /// Tolerance for the g ≤ b boundary compatibility precondition.
    pub boundary_tol: f64,
    /// Cap on Newton/policy iterations per time level.
    pub max_level_iters: usize,
    /// Cap on Gauss-Seidel sweeps in the brute oracle and fallback.
    pub max_sweeps: usize,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            tol: 1e-8,
            contact_tol: 1e-6,
            boundary_tol: 1e-9,
            max_level_iters: 200,
            max_sweeps: 100_000,
        }
    }
}

impl SolveParams {
    pub fn with_tol(tol: f64) -> Self {
        SolveParams {
            tol,
            ..SolveParams::default()
        }
    }

    fn inner_tol(&self) -> f64 {
        (self.tol * 1e-4).max(1e-14)
    }
}

/// Strictly decreasing positive penalty widths with the cubic smoothstep
/// transition Φ_ε.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySchedule {
    epsilons: Vec<f64>,
}

impl PenaltySchedule {
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.is_empty() {
            return Err(Error::InvalidParameter("empty penalty schedule".into()));
        }
        for w in epsilons.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidParameter(format!(
                    "penalty widths must decrease strictly: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let last = *epsilons.last().unwrap();
        if !(last > 0.0) || !epsilons.iter().all(|e| e.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty widths must stay positive and finite, last is {last}"
            )));
        }
        Ok(PenaltySchedule { epsilons })
    }

    /// Geometric schedule ε, ε/factor, …, with `steps` entries.
    pub fn geometric(eps1: f64, factor: f64, steps: usize) -> Result<Self> {
        if !(factor > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule factor must exceed 1, got {factor}"
            )));
        }
        let epsilons = (0..steps).map(|k| eps1 / factor.powi(k as i32)).collect();
        PenaltySchedule::new(epsilons)
    }

    /// Default schedule scaled to the obstacle size: ε₁ = max(1, sup|g|)/10,
    /// halving for 12 steps.
    pub fn default_for(g_sup: f64) -> Self {
        PenaltySchedule::geometric(g_sup.abs().max(1.0) * 0.1, 2.0, 12)
            .expect("static schedule parameters are valid")
    }

    /// Like [`PenaltySchedule::default_for`], but halving until the last
    /// step drops below half the target tolerance, so the limit of the
    /// sequence is resolved to the same accuracy as the rest of the solve.
    pub fn deep_for(g_sup: f64, tol: f64) -> Result<Self> {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "schedule tolerance must be positive, got {tol}"
            )));
        }
        let eps1 = g_sup.abs().max(1.0) * 0.1;
        let target = (tol * 0.5).min(eps1 * 0.25);
        let steps = ((eps1 / target).ln() / 2.0f64.ln()).ceil() as usize + 1;
        PenaltySchedule::geometric(eps1, 2.0, steps)
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    /// Cubic smoothstep: 0 below 0, 1 above ε, 3s² − 2s³ between.
    pub fn phi(eps: f64, a: f64) -> f64 {
        if a <= 0.0 {
            0.0
        } else if a >= eps {
            1.0
        } else {
            let s = a / eps;
            s * s * (3.0 - 2.0 * s)
        }
    }

    /// Derivative of the smoothstep in a.
    pub fn phi_prime(eps: f64, a: f64) -> f64 {
        if a <= 0.0 || a >= eps {
            0.0
        } else {
            let s = a / eps;
            6.0 * s * (1.0 - s) / eps
        }
    }
}

/// What a solver did and how well the output satisfies the equation. The
/// residual is recomputed from scratch on the final field, never carried
/// over from solver internals.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub route: String,
    /// Newton/policy iterations summed over time levels (and ε stages).
    pub level_iterations: usize,
    /// Nodewise fallback sweeps that were needed (0 in healthy runs).
    pub fallback_sweeps: usize,
    /// Recomputed max-norm residual of the output.
    pub residual_max: f64,
    /// min over nodes of (u − g): obstacle dominance margin.
    pub min_u_minus_g: f64,
    pub sup_u: f64,
    /// Nodes with u − g ≤ contact_tol.
    pub contact: Vec<NodeId>,
    /// Per-ε sup-norm distance of that stage's solution to the final one.
    pub penalty_trajectory: Vec<(f64, f64)>,
    pub wall_secs: f64,
}

/// Penalty data for one level, indexed by interior position.
struct LevelPenalty<'p> {
    h_plus: &'p [f64],
    g_ref: &'p [f64],
    eps: f64,
}

/// One static per-level system: find u with
/// max{ (u_next − u)/dt + max_α L^α u − pen(u), g_stop − u } = 0,
/// where pen(u) = h⁺·(Φ_ε(u − g_ref) − 1) when a penalty is present.
struct LevelSystem<'s> {
    rows: &'s LevelRows,
    dt: f64,
    u_next: &'s [f64],
    level_vals: &'s [f64],
    stop: Option<&'s [f64]>,
    penalty: Option<LevelPenalty<'s>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    Control(usize),
    Stop,
}

impl LevelSystem<'_> {
    fn size(&self) -> usize {
        self.u_next.len()
    }

    fn penalty_value(&self, i: usize, ui: f64) -> f64 {
        match &self.penalty {
            Some(p) => p.h_plus[i] * (PenaltySchedule::phi(p.eps, ui - p.g_ref[i]) - 1.0),
            None => 0.0,
        }
    }

    fn penalty_slope(&self, i: usize, ui: f64) -> f64 {
        match &self.penalty {
            Some(p) => p.h_plus[i] * PenaltySchedule::phi_prime(p.eps, ui - p.g_ref[i]),
            None => 0.0,
        }
    }

    /// Residual and active branch at every node.
    fn residual(&self, u: &[f64], out: &mut [f64], active: &mut [Branch]) {
        for i in 0..self.size() {
            let mut best = f64::NEG_INFINITY;
            let mut which = Branch::Control(0);
            for (a, ctrl_rows) in self.rows.rows.iter().enumerate() {
                let v = (self.u_next[i] - u[i]) / self.dt
                    + ctrl_rows[i].eval(u[i], u, self.level_vals);
                if v > best {
                    best = v;
                    which = Branch::Control(a);
                }
            }
            best -= self.penalty_value(i, u[i]);
            if let Some(g) = self.stop {
                let stop_v = g[i] - u[i];
                if stop_v > best {
                    best = stop_v;
                    which = Branch::Stop;
                }
            }
            out[i] = best;
            active[i] = which;
        }
    }

    /// Banded matrix of −J for the active branches (an M-matrix).
    fn neg_jacobian(&self, u: &[f64], active: &[Branch], bandwidth: usize) -> Banded {
        let n = self.size();
        let mut m = Banded::new(n, bandwidth.min(n.saturating_sub(1)));
        for i in 0..n {
            match active[i] {
                Branch::Stop => m.set(i, i, 1.0),
                Branch::Control(a) => {
                    let row = &self.rows.rows[a][i];
                    m.set(
                        i,
                        i,
                        1.0 / self.dt - row.diag + self.penalty_slope(i, u[i]),
                    );
                    for e in &row.entries {
                        if let Col::Interior(p) = e.col {
                            if p == i {
                                m.add(i, i, -e.coef);
                            } else {
                                m.add(i, p, -e.coef);
                            }
                        }
                    }
                }
            }
        }
        m
    }

    /// Root of the node-i scalar equation with the other unknowns frozen:
    /// the max of the per-branch roots, each branch strictly decreasing in
    /// u_i.
    fn nodewise_root(&self, u: &[f64], i: usize) -> f64 {
        let mut best = match self.stop {
            Some(g) => g[i],
            None => f64::NEG_INFINITY,
        };
        for ctrl_rows in &self.rows.rows {
            let row = &ctrl_rows[i];
            // Split the branch into the affine part in u_i and the rest.
            let mut rest = self.u_next[i] / self.dt + row.source;
            let mut own_coef = row.diag - 1.0 / self.dt;
            for e in &row.entries {
                let v = match e.col {
                    Col::Interior(p) if p == i => {
                        own_coef += e.coef;
                        continue;
                    }
                    Col::Interior(p) => u[p],
                    Col::Boundary(p) => self.level_vals[p],
                };
                rest += e.coef * v;
            }
            // Solve own_coef·v + rest − pen(v) = 0; own_coef < 0 and pen is
            // nondecreasing, so the left side strictly decreases in v.
            let affine_root = -rest / own_coef;
            let root = if self.penalty.is_none() {
                affine_root
            } else {
                let f = |v: f64| own_coef * v + rest - self.penalty_value(i, v);
                let p = self.penalty.as_ref().unwrap();
                // pen(v) ∈ [−h⁺, 0]: the root lies between the affine root
                // and the root with the full offset −h⁺ folded in.
                let other = (-rest - p.h_plus[i]) / own_coef;
                let (mut lo, mut hi) = if affine_root < other {
                    (affine_root, other)
                } else {
                    (other, affine_root)
                };
                lo -= 1e-12;
                hi += 1e-12;
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                        break;
                    }
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            best = best.max(root);
        }
        best
    }
}

/// Damped semismooth Newton on one level system, with nodewise sweeps as a
/// fallback when a step fails to reduce the residual.
fn solve_level(
    sys: &LevelSystem,
    bandwidth: usize,
    init: Vec<f64>,
    inner_tol: f64,
    params: &SolveParams,
    counters: &mut (usize, usize),
) -> Result<Vec<f64>> {
    let n = init.len();
    let mut u = init;
    let mut res = vec![0.0; n];
    let mut active = vec![Branch::Control(0); n];
    let mut res_try = vec![0.0; n];
    let mut active_try = vec![Branch::Control(0); n];
    for _ in 0..params.max_level_iters {
        sys.residual(&u, &mut res, &mut active);
        let sup = sup_norm(&res);
        if sup <= inner_tol {
            return Ok(u);
        }
        counters.0 += 1;
        let lu = sys.neg_jacobian(&u, &active, bandwidth).factor()?;
        let mut delta = res.clone();
        lu.solve_in_place(&mut delta);
        // Steep penalty transitions blow the residual's float noise up by
        // h⁺Φ' ~ 1/ε, so the pointwise residual may be unreachable even at
        // the exact root. Once the full Newton correction is at machine
        // scale, u is converged in the only sense that matters.
        let step_tol =
            (inner_tol * sys.dt).max(8.0 * f64::EPSILON * (1.0 + sup_norm(&u)));
        if sup_norm(&delta) <= step_tol {
            for (v, d) in u.iter_mut().zip(&delta) {
                *v += d;
            }
            return Ok(u);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let u_try: Vec<f64> = u
                .iter()
                .zip(&delta)
                .map(|(v, d)| v + step * d)
                .collect();
            sys.residual(&u_try, &mut res_try, &mut active_try);
            if sup_norm(&res_try) <= sup * (1.0 - 1e-4 * step) {
                u = u_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        // Newton creeps when many nodes must cross a steep penalty band:
        // the linear model cannot see the band, the accepted step collapses,
        // and the sup barely moves per factorization. Nodewise roots solve
        // each scalar equation exactly, band included, so sweep until the
        // residual has genuinely dropped before the next Newton step.
        let sup_now = if accepted { sup_norm(&res_try) } else { sup };
        if sup_now > 0.5 * sup {
            let target = 0.5 * sup;
            for _ in 0..50 {
                counters.1 += 1;
                let mut moved = 0.0f64;
                for i in 0..n {
                    let old = u[i];
                    u[i] = sys.nodewise_root(&u, i);
                    moved = moved.max((u[i] - old).abs() / (1.0 + old.abs()));
                }
                // A sweep that moves nothing representable means u is the
                // machine-precision fixed point: at steep penalty slopes
                // (h⁺Φ' ~ 1/ε) the pointwise residual bottoms out at
                // slope·ulp(u), far above the nominal tolerance, with the
                // root lying between adjacent floats.
                if moved <= 4.0 * f64::EPSILON {
                    return Ok(u);
                }
                sys.residual(&u, &mut res, &mut active);
                if sup_norm(&res) <= target {
                    break;
                }
            }
        }
    }
    sys.residual(&u, &mut res, &mut active);
    if sup_norm(&res) <= inner_tol {
        return Ok(u);
    }
    Err(Error::NonConvergence(format!(
        "level {} stalled at residual {:.3e} after {} iterations \
         (inner tolerance {:.3e})",
        sys.rows.level,
        sup_norm(&res),
        params.max_level_iters,
        inner_tol
    )))
}

struct MarchSpec<'m> {
    /// Obstacle enforced exactly through the stop branch.
    stop: Option<&'m GridFunction>,
    /// Penalized piece: positive part of its compatibility field and its
    /// values, plus the active ε.
    penalty: Option<(&'m GridFunction, &'m GridFunction, f64)>,
    /// Warm start for the whole cylinder.
    init: Option<&'m GridFunction>,
}

/// Backward march over all levels; returns the full solution field.
fn march(
    dop: &DiscreteOperator,
    b: &GridFunction,
    spec: MarchSpec,
    params: &SolveParams,
    counters: &mut (usize, usize),
) -> Result<GridFunction> {
    let grid = dop.grid();
    let ne = grid.non_exterior_spatial_count();
    let nt = grid.num_time_levels();
    let interior = grid.interior_spatial();
    let int_ne_pos: Vec<usize> = interior
        .iter()
        .map(|&s| grid.non_exterior_position(s).unwrap())
        .collect();
    let inner_tol = params.inner_tol();

    let mut u = GridFunction::zeros(grid);
    // Terminal slice and lateral boundary carry the data exactly.
    for level in 0..nt {
        for &sflat in grid.non_exterior_spatial() {
            if grid.classify(level, sflat) != NodeClass::Interior {
                let p = grid.non_exterior_position(sflat).unwrap();
                u.values_mut()[level * ne + p] = b.values()[level * ne + p];
            }
        }
    }

    let at_interior = |f: &GridFunction, level: usize| -> Vec<f64> {
        int_ne_pos
            .iter()
            .map(|&p| f.values()[level * ne + p])
            .collect()
    };

    for level in (0..nt - 1).rev() {
        let rows = dop.level_rows(level)?;
        let u_next = at_interior(&u, level + 1);
        let level_vals = &b.values()[level * ne..(level + 1) * ne];
        let stop_vals = spec.stop.map(|g| at_interior(g, level));
        let pen_h = spec.penalty.map(|(h, _, _)| at_interior(h, level));
        let pen_g = spec.penalty.map(|(_, g, _)| at_interior(g, level));
        let sys = LevelSystem {
            rows: &rows,
            dt: grid.dt(),
            u_next: &u_next,
            level_vals,
            stop: stop_vals.as_deref(),
            penalty: spec.penalty.map(|(_, _, eps)| LevelPenalty {
                h_plus: pen_h.as_deref().unwrap(),
                g_ref: pen_g.as_deref().unwrap(),
                eps,
            }),
        };
        let init = match spec.init {
            Some(w) => at_interior(w, level),
            None => match &stop_vals {
                Some(g) => u_next
                    .iter()
                    .zip(g.iter())
                    .map(|(a, b)| a.max(*b))
                    .collect(),
                None => u_next.clone(),
            },
        };
        let sol = solve_level(&sys, dop.bandwidth(), init, inner_tol, params, counters)?;
        for (pos, &p) in int_ne_pos.iter().enumerate() {
            u.values_mut()[level * ne + p] = sol[pos];
        }
    }
    Ok(u)
}

fn check_preconditions(
    dop: &DiscreteOperator,
    g: Option<&GridFunction>,
    b: &GridFunction,
    params: &SolveParams,
) -> Result<()> {
    let cert = dop.certificate();
    if !cert.monotone {
        return Err(Error::NotMonotone(
            "solver requires a monotone-certified discretization".into(),
        ));
    }
    if !cert.time_coupling_ok {
        return Err(Error::NotMonotone(format!(
            "zeroth-order coefficient reaches {:.3e} ≥ 1/dt = {:.3e}; \
             shrink the time step",
            cert.max_c,
            1.0 / dop.grid().dt()
        )));
    }
    let grid = dop.grid();
    b.check_grid(grid)?;
    if let Some(g) = g {
        g.check_grid(grid)?;
        for node in grid.non_exterior_nodes() {
            match grid.classify(node.level, node.sflat) {
                NodeClass::LateralBoundary | NodeClass::TerminalSlice => {
                    let gv = g.at(grid, node.level, node.sflat);
                    let bv = b.at(grid, node.level, node.sflat);
                    if gv > bv + params.boundary_tol {
                        return Err(Error::BoundaryIncompatible(format!(
                            "obstacle exceeds boundary data at level {}, node {}: \
                             g = {gv}, b = {bv}",
                            node.level, node.sflat
                        )));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn finish_report(
    route: &str,
    dop: &DiscreteOperator,
    u: &GridFunction,
    g: &GridFunction,
    b: &GridFunction,
    params: &SolveParams,
    counters: (usize, usize),
    trajectory: Vec<(f64, f64)>,
    started: Instant,
) -> Result<SolveReport> {
    let grid = dop.grid();
    let res = residual(dop, u, g, b)?;
    let mut min_gap = f64::INFINITY;
    let mut contact = Vec::new();
    for node in grid.non_exterior_nodes() {
        let gap = u.at(grid, node.level, node.sflat) - g.at(grid, node.level, node.sflat);
        min_gap = min_gap.min(gap);
        if gap <= params.contact_tol {
            contact.push(node);
        }
    }
    Ok(SolveReport {
        route: route.to_string(),
        level_iterations: counters.0,
        fallback_sweeps: counters.1,
        residual_max: sup_norm(res.values()),
        min_u_minus_g: min_gap,
        sup_u: u.sup(),
        contact,
        penalty_trajectory: trajectory,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Solve the obstacle problem exactly (complementarity form) by backward
/// policy iteration with a stop control. The output satisfies u = b on the
/// boundary, u ≥ g − tol everywhere, and recomputed residual ≤ tol.
pub fn solve_direct(
    dop: &DiscreteOperator,
    g: &GridFunction,
    b: &GridFunction,
    params: &SolveParams,
) -> Result<(GridFunction, SolveReport)> {
    let started = Instant::now();
    check_preconditions(dop, Some(g), b, params)?;
    let mut counters = (0usize, 0usize);
    let u = march(
        dop,
        b,
        MarchSpec {
            stop: Some(g),
            penalty: None,
            init: None,
        },
        params,
        &mut counters,
    )?;
    let report = finish_report("direct", dop, &u, g, b, params, counters, Vec::new(), started)?;
    if report.residual_max > params.tol {
        return Err(Error::NonConvergence(format!(
            "direct solve finished with residual {:.3e} above tolerance {:.3e}",
            report.residual_max, params.tol
        )));
    }
    Ok((u, report))
}

/// Outcome of the penalty route: all per-ε solutions plus the final one.
#[derive(Debug, Clone)]
pub struct PenalizedOutcome {
    pub sequence: Vec<GridFunction>,
    pub limit: GridFunction,
    pub report: SolveReport,
}

/// Rescale a warm start between penalty stages. Inside the transition band
/// the converged iterate balances at u ≈ g + ε·θ with θ fixed by the smooth
/// part of the equation, so shrinking ε moves that balance point toward g
/// in proportion. Scaling the band gap by the ε ratio drops those nodes
/// straight into the new band instead of leaving the whole contact front to
/// creep across it one damped Newton step at a time.
fn rescale_band(u: &GridFunction, g: &GridFunction, eps_old: f64, eps_new: f64) -> GridFunction {
    let mut v = u.clone();
    let ratio = eps_new / eps_old;
    for (vi, &gi) in v.values_mut().iter_mut().zip(g.values()) {
        let gap = *vi - gi;
        if gap > 0.0 && gap < eps_old {
            *vi = gi + ratio * gap;
        }
    }
    v
}

/// Solve with a single obstacle piece via the penalty construction: for
/// each ε in the schedule, solve u_t + F_h[u] = h⁺Φ_ε(u − g) − h⁺ with
/// Dirichlet data, warm-starting each stage from the previous one.
pub fn solve_penalized(
    op: &BellmanOperator,
    piece: &ObstaclePiece,
    b: &GridFunction,
    schedule: &PenaltySchedule,
    grid: &SpaceTimeGrid,
    params: &SolveParams,
) -> Result<PenalizedOutcome> {
    let started = Instant::now();
    let dop = assemble(op, grid)?;
    let g = crate::obstacles::piece_field(piece, grid)?;
    check_preconditions(&dop, Some(&g), b, params)?;
    let compat = compatibility_h(piece, op, grid, f64::INFINITY)?;
    let mut counters = (0usize, 0usize);
    let mut sequence: Vec<GridFunction> = Vec::with_capacity(schedule.epsilons().len());
    let mut prev_eps = f64::NAN;
    for &eps in schedule.epsilons() {
        let scaled = sequence.last().map(|u| rescale_band(u, &g, prev_eps, eps));
        let u = march(
            &dop,
            b,
            MarchSpec {
                stop: None,
                penalty: Some((&compat.h_plus, &g, eps)),
                init: scaled.as_ref(),
            },
            params,
            &mut counters,
        )?;
        sequence.push(u);
        prev_eps = eps;
    }
    let limit = sequence.last().unwrap().clone();
    let trajectory: Vec<(f64, f64)> = schedule
        .epsilons()
        .iter()
        .zip(&sequence)
        .map(|(&eps, u)| (eps, sup_diff(u.values(), limit.values())))
        .collect();
    let report = finish_report(
        "penalized",
        &dop,
        &limit,
        &g,
        b,
        params,
        counters,
        trajectory,
        started,
    )?;
    Ok(PenalizedOutcome {
        sequence,
        limit,
        report,
    })
}

/// Solve with a full family by the incremental construction: pieces enter
/// one at a time; those already installed are enforced exactly through the
/// stop branch while the newest enters through its penalty term, iterated
/// over the ε schedule.
pub fn solve_incremental(
    op: &BellmanOperator,
    family: &ObstacleFamily,
    b: &GridFunction,
    schedule: &PenaltySchedule,
    grid: &SpaceTimeGrid,
    params: &SolveParams,
) -> Result<(GridFunction, SolveReport)> {
    let started = Instant::now();
    let dop = assemble(op, grid)?;
    let (g_full, _) = obstacle_field(family, grid)?;
    check_preconditions(&dop, Some(&g_full), b, params)?;
    let mut counters = (0usize, 0usize);
    let mut current: Option<GridFunction> = None;
    let mut trajectory = Vec::new();
    for (idx, piece) in family.pieces().iter().enumerate() {
        let partial = if idx == 0 {
            None
        } else {
            let (g_partial, _) = obstacle_field(&family.prefix(idx)?, grid)?;
            Some(g_partial)
        };
        let g_new = crate::obstacles::piece_field(piece, grid)?;
        let compat = compatibility_h(piece, op, grid, f64::INFINITY)?;
        let mut stage: Vec<GridFunction> = Vec::with_capacity(schedule.epsilons().len());
        let mut prev_eps = f64::NAN;
        for &eps in schedule.epsilons() {
            // Between stages of the same piece the band gap rescales; the
            // carry-over from the previous piece enters a fresh schedule and
            // is used as-is.
            let scaled = stage.last().map(|u| rescale_band(u, &g_new, prev_eps, eps));
            let u = march(
                &dop,
                b,
                MarchSpec {
                    stop: partial.as_ref(),
                    penalty: Some((&compat.h_plus, &g_new, eps)),
                    init: scaled.as_ref().or(current.as_ref()),
                },
                params,
                &mut counters,
            )?;
            stage.push(u);
            prev_eps = eps;
        }
        if idx == family.pieces().len() - 1 {
            let last = stage.last().unwrap();
            trajectory = schedule
                .epsilons()
                .iter()
                .zip(&stage)
                .map(|(&eps, u)| (eps, sup_diff(u.values(), last.values())))
                .collect();
        }
        current = stage.pop();
    }
    let u = current.unwrap();
    let report = finish_report(
        "incremental",
        &dop,
        &u,
        &g_full,
        b,
        params,
        counters,
        trajectory,
        started,
    )?;
    Ok((u, report))
}

/// Nodewise Gauss-Seidel oracle for tiny instances (≤ 500 unknowns):
/// u_i ← max{g_i, per-control one-node root}, swept until the sup-norm
/// change drops below tol·1e-3.
pub fn brute_oracle(
    dop: &DiscreteOperator,
    g: &GridFunction,
    b: &GridFunction,
    tol: f64,
) -> Result<GridFunction> {
    let grid = dop.grid();
    let params = SolveParams::with_tol(tol);
    check_preconditions(dop, Some(g), b, &params)?;
    let nt = grid.num_time_levels();
    let ne = grid.non_exterior_spatial_count();
    let n_int = grid.interior_spatial_count();
    let unknowns = n_int * (nt - 1);
    if unknowns > 500 {
        return Err(Error::GridTooLarge(format!(
            "brute oracle is limited to 500 unknowns, instance has {unknowns}"
        )));
    }
    let int_ne_pos: Vec<usize> = grid
        .interior_spatial()
        .iter()
        .map(|&s| grid.non_exterior_position(s).unwrap())
        .collect();

    let mut u = GridFunction::zeros(grid);
    for level in 0..nt {
        for &sflat in grid.non_exterior_spatial() {
            let p = grid.non_exterior_position(sflat).unwrap();
            let k = level * ne + p;
            u.values_mut()[k] = if grid.classify(level, sflat) == NodeClass::Interior {
                g.values()[k]
            } else {
                b.values()[k]
            };
        }
    }

    let mut rows_by_level = Vec::with_capacity(nt - 1);
    for level in 0..nt - 1 {
        rows_by_level.push(dop.level_rows(level)?);
    }

    let threshold = tol * 1e-3;
    for _sweep in 0..params.max_sweeps {
        let mut change = 0.0f64;
        for level in (0..nt - 1).rev() {
            let u_next: Vec<f64> = int_ne_pos
                .iter()
                .map(|&p| u.values()[(level + 1) * ne + p])
                .collect();
            let mut u_int: Vec<f64> = int_ne_pos
                .iter()
                .map(|&p| u.values()[level * ne + p])
                .collect();
            let g_int: Vec<f64> = int_ne_pos
                .iter()
                .map(|&p| g.values()[level * ne + p])
                .collect();
            let level_vals: Vec<f64> =
                u.values()[level * ne..(level + 1) * ne].to_vec();
            let sys = LevelSystem {
                rows: &rows_by_level[level],
                dt: grid.dt(),
                u_next: &u_next,
                level_vals: &level_vals,
                stop: Some(&g_int),
                penalty: None,
            };
            for i in 0..n_int {
                let new = sys.nodewise_root(&u_int, i);
                change = change.max((new - u_int[i]).abs());
                u_int[i] = new;
            }
            for (pos, &p) in int_ne_pos.iter().enumerate() {
                u.values_mut()[level * ne + p] = u_int[pos];
            }
        }
        if change < threshold {
            return Ok(u);
        }
    }
    Err(Error::NonConvergence(format!(
        "brute oracle did not settle within {} sweeps",
        params.max_sweeps
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::residual_pde;
    use crate::geometry::build_grid;
    use crate::linalg::SymMat;
    use crate::obstacles::ObstacleFamily;
    use crate::operators::{Control, EllipticityEnvelope};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn heat_op() -> BellmanOperator {
        BellmanOperator::new(
            1,
            vec![Control::constant("heat", SymMat::identity(1), vec![0.0], 0.0, 0.0)],
            EllipticityEnvelope::new(1.0, 1.0, 0.0).unwrap(),
            Arc::new(|_, _| 0.0),
        )
        .unwrap()
    }

    fn quad_piece(label: &str, a: f64, b: f64, c: f64) -> ObstaclePiece {
        ObstaclePiece::new(
            label,
            Arc::new(move |_, x: &[f64]| a * x[0] * x[0] + b * x[0] + c),
            Arc::new(|_, _: &[f64]| 0.0),
            Arc::new(move |_, x: &[f64]| vec![2.0 * a * x[0] + b]),
            Arc::new(move |_, _: &[f64]| SymMat::from_diag(&[2.0 * a])),
        )
    }

    #[test]
    fn schedule_validation_and_smoothstep_shape() {
        assert!(PenaltySchedule::new(vec![]).is_err());
        assert!(PenaltySchedule::new(vec![0.1, 0.1]).is_err());
        assert!(PenaltySchedule::new(vec![0.1, 0.2]).is_err());
        assert!(PenaltySchedule::new(vec![0.1, 0.0]).is_err());
        assert!(PenaltySchedule::geometric(0.1, 1.0, 3).is_err());
        let s = PenaltySchedule::geometric(0.4, 2.0, 3).unwrap();
        assert_eq!(s.epsilons(), &[0.4, 0.2, 0.1]);
        let d = PenaltySchedule::default_for(3.0);
        assert_eq!(d.epsilons().len(), 12);
        assert!((d.epsilons()[0] - 0.3).abs() < 1e-15);

        let eps = 0.25;
        assert_eq!(PenaltySchedule::phi(eps, -1.0), 0.0);
        assert_eq!(PenaltySchedule::phi(eps, 0.0), 0.0);
        assert_eq!(PenaltySchedule::phi(eps, eps), 1.0);
        assert_eq!(PenaltySchedule::phi(eps, 1.0), 1.0);
        assert!((PenaltySchedule::phi(eps, eps / 2.0) - 0.5).abs() < 1e-15);
        let mut prev = -1.0;
        for k in 0..=100 {
            let a = -0.1 + 0.45 * k as f64 / 100.0;
            let v = PenaltySchedule::phi(eps, a);
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev);
            prev = v;
            // phi_prime matches a centered difference away from the joins.
            let d = 1e-7;
            let fd = (PenaltySchedule::phi(eps, a + d) - PenaltySchedule::phi(eps, a - d))
                / (2.0 * d);
            if (a - 0.0).abs() > 1e-3 && (a - eps).abs() > 1e-3 {
                assert!((fd - PenaltySchedule::phi_prime(eps, a)).abs() < 1e-5);
            }
        }
    }

    /// Thomas-algorithm oracle for the obstacle-free backward march.
    fn tridiag_dirichlet_oracle(
        a: f64,
        bdrift: f64,
        c: f64,
        f: f64,
        grid: &SpaceTimeGrid,
        b: &GridFunction,
    ) -> GridFunction {
        let n = grid.nodes_per_axis()[0];
        let nt = grid.num_time_levels();
        let h = grid.spacings()[0];
        let dt = grid.dt();
        let mut u = b.clone();
        let w = a / (h * h);
        let (lo_coef, hi_coef) = (w + (-bdrift).max(0.0) / h, w + bdrift.max(0.0) / h);
        let diag = 1.0 / dt + lo_coef + hi_coef - c;
        for level in (0..nt - 1).rev() {
            let m = n - 2;
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                rhs[i] = u.at(grid, level + 1, i + 1) / dt + f;
            }
            rhs[0] += lo_coef * b.at(grid, level, 0);
            rhs[m - 1] += hi_coef * b.at(grid, level, n - 1);
            // Thomas sweep for −lo·u_{i−1} + diag·u_i − hi·u_{i+1} = rhs.
            let mut cp = vec![0.0; m];
            let mut dp = vec![0.0; m];
            cp[0] = hi_coef / diag;
            dp[0] = rhs[0] / diag;
            for i in 1..m {
                let denom = diag - lo_coef * cp[i - 1];
                cp[i] = hi_coef / denom;
                dp[i] = (rhs[i] + lo_coef * dp[i - 1]) / denom;
            }
            let mut sol = vec![0.0; m];
            sol[m - 1] = dp[m - 1];
            for i in (0..m - 1).rev() {
                sol[i] = dp[i] + cp[i] * sol[i + 1];
            }
            for i in 0..m {
                u.set_at(grid, level, i + 1, sol[i]);
            }
        }
        u
    }

    #[test]
    fn obstacle_free_direct_solve_matches_tridiagonal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let a = rng.random_range(0.5..2.0);
            let bd = rng.random_range(-1.5..1.5);
            let c = rng.random_range(-1.0..0.0);
            let f = rng.random_range(-1.0..1.0);
            let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 6, 1.0).unwrap();
            let op = BellmanOperator::new(
                1,
                vec![Control::constant("only", SymMat::from_diag(&[a]), vec![bd], c, f)],
                EllipticityEnvelope::new(a, a, 2.0).unwrap(),
                Arc::new(move |_, _| f.abs()),
            )
            .unwrap();
            let dop = assemble(&op, &grid).unwrap();
            let b = GridFunction::from_fn(&grid, |t, x| (x[0] - 0.3 * t).cos()).unwrap();
            let g = GridFunction::constant(&grid, -1e12);
            let params = SolveParams::default();
            let (u, report) = solve_direct(&dop, &g, &b, &params).unwrap();
            let oracle = tridiag_dirichlet_oracle(a, bd, c, f, &grid, &b);
            assert!(u.sup_diff(&oracle).unwrap() < 1e-10);
            assert!(report.residual_max <= params.tol);
            assert!(report.contact.is_empty());
        }
    }

    #[test]
    fn constant_solution_touches_constant_obstacle() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[7], 4, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let one = GridFunction::constant(&grid, 1.0);
        let (u, report) = solve_direct(&dop, &one, &one, &SolveParams::default()).unwrap();
        assert!(u.sup_diff(&one).unwrap() < 1e-13);
        assert_eq!(report.contact.len(), grid.non_exterior_count());
        assert!(report.min_u_minus_g.abs() < 1e-13);
    }

    #[test]
    fn brute_oracle_fixed_point_and_budget() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[7], 4, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let zero = GridFunction::zeros(&grid);
        let u = brute_oracle(&dop, &zero, &zero, 1e-8).unwrap();
        assert!(sup_norm(u.values()) < 1e-12);

        let big = build_grid(&[(-1.0, 1.0)], &[], &[103], 7, 1.0).unwrap();
        let dop_big = assemble(&op, &big).unwrap();
        let z = GridFunction::zeros(&big);
        assert!(matches!(
            brute_oracle(&dop_big, &z, &z, 1e-8),
            Err(Error::GridTooLarge(_))
        ));
    }

    #[test]
    fn direct_solve_matches_brute_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..8 {
            let grid = build_grid(&[(-1.0, 1.0)], &[], &[7], 3, 1.0).unwrap();
            let a1 = rng.random_range(0.5..1.5);
            let a2 = rng.random_range(0.5..1.5);
            let op = BellmanOperator::new(
                1,
                vec![
                    Control::constant(
                        "u1",
                        SymMat::from_diag(&[a1]),
                        vec![rng.random_range(-1.0..1.0)],
                        rng.random_range(-0.5..0.0),
                        rng.random_range(-0.5..0.5),
                    ),
                    Control::constant(
                        "u2",
                        SymMat::from_diag(&[a2]),
                        vec![rng.random_range(-1.0..1.0)],
                        rng.random_range(-0.5..0.0),
                        rng.random_range(-0.5..0.5),
                    ),
                ],
                EllipticityEnvelope::new(0.5, 1.5, 2.0).unwrap(),
                Arc::new(|_, _| 0.5),
            )
            .unwrap();
            let dop = assemble(&op, &grid).unwrap();
            let slope = rng.random_range(-0.5..0.5);
            let lift = rng.random_range(-0.5..0.0);
            let g = GridFunction::from_fn(&grid, |_, x| slope * x[0] + lift).unwrap();
            let b = GridFunction::from_fn(&grid, |t, x| {
                (slope * x[0] + lift).max(0.0) + 0.1 * t * x[0].cos()
            })
            .unwrap();
            let params = SolveParams::default();
            let (u, report) = solve_direct(&dop, &g, &b, &params).unwrap();
            let oracle = brute_oracle(&dop, &g, &b, params.tol).unwrap();
            assert!(
                u.sup_diff(&oracle).unwrap() < 1e-9,
                "trial {trial}: direct vs brute {}",
                u.sup_diff(&oracle).unwrap()
            );
            assert!(report.min_u_minus_g >= -params.tol);
        }
    }

    #[test]
    fn inactive_penalty_reduces_to_dirichlet_solve() {
        // g = x² under the heat operator has h = −2 < 0: no penalty at all.
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = heat_op();
        let piece = quad_piece("bowl", 1.0, 0.0, 0.0);
        let b = GridFunction::from_fn(&grid, |_, x| x[0] * x[0]).unwrap();
        let schedule = PenaltySchedule::geometric(0.1, 2.0, 4).unwrap();
        let params = SolveParams::default();
        let out = solve_penalized(&op, &piece, &b, &schedule, &grid, &params).unwrap();
        // Every ε stage solves the same plain Dirichlet problem.
        for u in &out.sequence {
            assert!(u.sup_diff(&out.limit).unwrap() < 1e-12);
        }
        let dop = assemble(&op, &grid).unwrap();
        let free = GridFunction::constant(&grid, -1e12);
        let (w, _) = solve_direct(&dop, &free, &b, &params).unwrap();
        assert!(out.limit.sup_diff(&w).unwrap() < 1e-10);
        // And the PDE branch alone is satisfied.
        let r = residual_pde(&dop, &out.limit, &b).unwrap();
        assert!(sup_norm(r.values()) < 1e-9);
    }

    #[test]
    fn penalized_gap_to_direct_shrinks_along_schedule() {
        // g = 1 − x² with h = 2 > 0: the obstacle binds in the middle.
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[17], 9, 1.0).unwrap();
        let op = heat_op();
        let piece = quad_piece("cap", -1.0, 0.0, 1.0);
        let g = crate::obstacles::piece_field(&piece, &grid).unwrap();
        let b = GridFunction::from_fn(&grid, |t, x| {
            if (1.0 - t).abs() < 1e-12 {
                1.0 - x[0] * x[0]
            } else {
                0.0
            }
        })
        .unwrap();
        let params = SolveParams::default();
        let dop = assemble(&op, &grid).unwrap();
        let (w, _) = solve_direct(&dop, &g, &b, &params).unwrap();

        let schedule = PenaltySchedule::geometric(0.1, 2.0, 30).unwrap();
        let out = solve_penalized(&op, &piece, &b, &schedule, &grid, &params).unwrap();
        let gaps: Vec<f64> = out
            .sequence
            .iter()
            .map(|u| u.sup_diff(&w).unwrap())
            .collect();
        for pair in gaps.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-10,
                "gap increased along the schedule: {gaps:?}"
            );
        }
        assert!(
            *gaps.last().unwrap() <= 10.0 * params.tol,
            "final gap {} too large",
            gaps.last().unwrap()
        );
        // The penalized solution approaches the obstacle solution from above.
        let above = out
            .limit
            .values()
            .iter()
            .zip(w.values())
            .map(|(a, b)| b - a)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(above <= 1e-9);
        assert!(out.report.min_u_minus_g >= -params.tol);
        assert!(out.report.residual_max <= 10.0 * params.tol);
    }

    #[test]
    fn contact_nodes_inherit_obstacle_differences() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[33], 17, 1.0).unwrap();
        let op = heat_op();
        let piece = quad_piece("cap", -1.0, 0.0, 1.0);
        let g = crate::obstacles::piece_field(&piece, &grid).unwrap();
        let b = GridFunction::from_fn(&grid, |t, x| {
            if (1.0 - t).abs() < 1e-12 {
                1.0 - x[0] * x[0]
            } else {
                0.0
            }
        })
        .unwrap();
        let params = SolveParams::default();
        let dop = assemble(&op, &grid).unwrap();
        let (u, report) = solve_direct(&dop, &g, &b, &params).unwrap();
        assert!(!report.contact.is_empty());
        let h = grid.spacings()[0];
        let contact: std::collections::HashSet<_> = report.contact.iter().collect();
        for node in &report.contact {
            if grid.classify(node.level, node.sflat) != NodeClass::Interior {
                continue;
            }
            // Deep contact: spatial neighbors and next time level also touch.
            let interiorly = [
                NodeId { level: node.level, sflat: node.sflat - 1 },
                NodeId { level: node.level, sflat: node.sflat + 1 },
                NodeId { level: node.level + 1, sflat: node.sflat },
            ]
            .iter()
            .all(|n| contact.contains(n));
            if !interiorly {
                continue;
            }
            let du = (u.at(&grid, node.level, node.sflat + 1)
                - u.at(&grid, node.level, node.sflat - 1))
                / (2.0 * h);
            let x = grid.spatial_coords(node.sflat)[0];
            let gx = -2.0 * x;
            assert!(
                (du - gx).abs() <= 2.0 * h + 1e-6,
                "contact slope {du} vs obstacle slope {gx}"
            );
        }
    }

    #[test]
    fn incremental_single_piece_matches_penalized() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[13], 7, 1.0).unwrap();
        let op = heat_op();
        let piece = quad_piece("cap", -1.0, 0.0, 0.5);
        let family = ObstacleFamily::new(vec![piece.clone()]).unwrap();
        let b = GridFunction::constant(&grid, 0.6);
        let schedule = PenaltySchedule::geometric(0.1, 2.0, 10).unwrap();
        let params = SolveParams::default();
        let pen = solve_penalized(&op, &piece, &b, &schedule, &grid, &params).unwrap();
        let (inc, _) = solve_incremental(&op, &family, &b, &schedule, &grid, &params).unwrap();
        assert!(inc.sup_diff(&pen.limit).unwrap() < 1e-12);
    }

    #[test]
    fn dominated_piece_changes_nothing() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[13], 7, 1.0).unwrap();
        let op = heat_op();
        let top = quad_piece("top", -1.0, 0.0, 0.5);
        let low = quad_piece("low", -1.0, 0.0, 0.1);
        let b = GridFunction::constant(&grid, 0.6);
        let schedule = PenaltySchedule::geometric(0.1, 2.0, 26).unwrap();
        let params = SolveParams::default();
        let fam_two = ObstacleFamily::new(vec![top.clone(), low]).unwrap();
        let (u2, _) = solve_incremental(&op, &fam_two, &b, &schedule, &grid, &params).unwrap();
        let dop = assemble(&op, &grid).unwrap();
        let g1 = crate::obstacles::piece_field(&top, &grid).unwrap();
        let (u1, _) = solve_direct(&dop, &g1, &b, &params).unwrap();
        assert!(u2.sup_diff(&u1).unwrap() <= 10.0 * params.tol);
    }

    #[test]
    fn incremental_three_pieces_matches_direct_on_envelope() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[17], 9, 1.0).unwrap();
        let op = heat_op();
        let pieces = vec![
            quad_piece("left", 0.0, -0.6, 0.0),
            quad_piece("right", 0.0, 0.6, 0.0),
            quad_piece("bump", -0.8, 0.0, 0.55),
        ];
        let family = ObstacleFamily::new(pieces).unwrap();
        let (g, _) = obstacle_field(&family, &grid).unwrap();
        let b = GridFunction::from_fn(&grid, |_, x| {
            (0.6 * x[0].abs()).max(0.55 - 0.8 * x[0] * x[0])
        })
        .unwrap();
        let schedule = PenaltySchedule::geometric(0.1, 2.0, 30).unwrap();
        let params = SolveParams::default();
        let (inc, report) =
            solve_incremental(&op, &family, &b, &schedule, &grid, &params).unwrap();
        let dop = assemble(&op, &grid).unwrap();
        let (dir, _) = solve_direct(&dop, &g, &b, &params).unwrap();
        assert!(
            inc.sup_diff(&dir).unwrap() <= 10.0 * params.tol,
            "route gap {}",
            inc.sup_diff(&dir).unwrap()
        );
        assert!(report.min_u_minus_g >= -params.tol);
        assert!(report.residual_max <= 10.0 * params.tol);
    }

    #[test]
    fn refined_contact_front_crosses_the_band_without_stalling() {
        // Two controls with distinct forcing leave the penalty balance
        // point strictly inside the transition band, so on a refined grid
        // the whole contact front must cross the band again at every ε
        // stage. Damped Newton alone creeps across one node per
        // factorization and hits the iteration cap; the nodewise sweeps
        // and the rescaled warm starts keep the cost per stage flat.
        let op = BellmanOperator::new(
            1,
            vec![
                Control::constant("low", SymMat::from_diag(&[0.3]), vec![0.1], -0.1, -3.0),
                Control::constant("high", SymMat::identity(1), vec![-0.2], -0.1, -3.2),
            ],
            EllipticityEnvelope::new(0.3, 1.0, 0.2).unwrap(),
            Arc::new(|_, _| 0.1),
        )
        .unwrap();
        let pieces = vec![
            quad_piece("l2", 0.0, 0.2, -0.01),
            quad_piece("l5", 0.0, 0.5, -0.0625),
        ];
        let family = ObstacleFamily::new(pieces).unwrap();
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[201], 4, 1.0).unwrap();
        let b = GridFunction::constant(&grid, 1.0);
        let schedule = PenaltySchedule::geometric(0.05, 2.5, 24).unwrap();
        let params = SolveParams::default();
        let (u, report) =
            solve_incremental(&op, &family, &b, &schedule, &grid, &params).unwrap();
        assert!(
            report.residual_max <= 10.0 * params.tol,
            "residual {}",
            report.residual_max
        );
        assert!(report.min_u_minus_g >= -params.tol);
        let dop = assemble(&op, &grid).unwrap();
        let (g, _) = obstacle_field(&family, &grid).unwrap();
        let (dir, _) = solve_direct(&dop, &g, &b, &params).unwrap();
        assert!(
            u.sup_diff(&dir).unwrap() <= 10.0 * params.tol,
            "route gap {}",
            u.sup_diff(&dir).unwrap()
        );
    }

    #[test]
    fn raising_data_never_lowers_the_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let params = SolveParams::default();
        for _ in 0..6 {
            let s = rng.random_range(-0.5..0.5);
            let lift = rng.random_range(-0.3..0.0);
            let g = GridFunction::from_fn(&grid, |_, x| s * x[0] + lift).unwrap();
            let b = GridFunction::from_fn(&grid, |_, x| (s * x[0] + lift).max(0.0)).unwrap();
            let (u, _) = solve_direct(&dop, &g, &b, &params).unwrap();

            let bump = rng.random_range(0.0..0.3);
            let g_hi =
                GridFunction::from_values(&grid, g.values().iter().map(|v| v + bump).collect())
                    .unwrap();
            let b_hi =
                GridFunction::from_values(&grid, b.values().iter().map(|v| v + bump).collect())
                    .unwrap();
            let (u_g, _) = solve_direct(&dop, &g_hi, &b_hi, &params).unwrap();
            for (lo, hi) in u.values().iter().zip(u_g.values()) {
                assert!(*hi >= lo - 1e-10);
            }
        }
    }

    #[test]
    fn unreachable_tolerance_reports_nonconvergence() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = BellmanOperator::new(
            1,
            vec![Control::constant("src", SymMat::identity(1), vec![0.0], 0.0, 0.3)],
            EllipticityEnvelope::new(1.0, 1.0, 0.0).unwrap(),
            Arc::new(|_, _| 0.3),
        )
        .unwrap();
        let dop = assemble(&op, &grid).unwrap();
        let g = GridFunction::from_fn(&grid, |_, x| -x[0].abs()).unwrap();
        let b = GridFunction::from_fn(&grid, |_, x| 0.2 * x[0].cos()).unwrap();
        let params = SolveParams::with_tol(1e-30);
        assert!(matches!(
            solve_direct(&dop, &g, &b, &params),
            Err(Error::NonConvergence(_))
        ));
    }

    #[test]
    fn boundary_incompatibility_is_rejected() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let g = GridFunction::constant(&grid, 1.0);
        let b = GridFunction::zeros(&grid);
        assert!(matches!(
            solve_direct(&dop, &g, &b, &SolveParams::default()),
            Err(Error::BoundaryIncompatible(_))
        ));
    }
}
