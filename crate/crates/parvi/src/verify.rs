//! A posteriori checks: everything the solver's outputs are supposed to
//! satisfy, measured rather than trusted.
//!
//! The checks mirror the structural facts behind the scheme: solutions
//! dominate the obstacle and have small residual (measured in
//! `discretize::residual`), ordered data produce ordered solutions, kink
//! nodes of the obstacle stay strictly below the solution before the
//! terminal time, interior Sobolev-type norms stay bounded by the data
//! norms under refinement, and solutions settle as the grid refines.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::discretize::{assemble, residual, DiscreteOperator};
use crate::error::{Error, Result};
use crate::geometry::{GridFunction, NodeClass, NodeId, SpaceTimeGrid};
use crate::obstacles::{locate_kinks, obstacle_field, KinkNode, ObstacleFamily};
use crate::operators::{BellmanOperator, ScalarField};
use crate::solve::{solve_direct, SolveParams};

/// Discrete space-time Sobolev norm of u over a set of non-exterior nodes:
/// the ℓ^p sum (cell weight dt·Πh) of |u|, the forward time difference,
/// first space differences, and second space differences, all formed only
/// from nodes inside the set (one-sided at its edges, skipped where no
/// admissible stencil remains). Mixed second differences need all four
/// corner nodes and enter once per ordered pair. p = ∞ takes the max.
/// p must exceed d + 2.
pub fn discrete_sobolev_norm(
    u: &GridFunction,
    grid: &SpaceTimeGrid,
    p: f64,
    subdomain: &[NodeId],
) -> Result<f64> {
    u.check_grid(grid)?;
    let d = grid.dim();
    if !(p > (d + 2) as f64) {
        return Err(Error::InvalidParameter(format!(
            "integrability exponent must exceed d + 2 = {}, got {p}",
            d + 2
        )));
    }
    if subdomain.is_empty() {
        return Err(Error::InvalidParameter(
            "empty node set has no norm".into(),
        ));
    }
    let set: HashSet<(usize, usize)> = subdomain
        .iter()
        .map(|n| (n.level, n.sflat))
        .collect();
    for n in subdomain {
        if grid.classify(n.level, n.sflat) == NodeClass::Exterior {
            return Err(Error::InvalidParameter(format!(
                "node at level {}, index {} lies outside the domain",
                n.level, n.sflat
            )));
        }
    }
    let dt = grid.dt();
    let h = grid.spacings().to_vec();
    let weight = dt * h.iter().product::<f64>();
    let infinite = p.is_infinite();
    let mut acc = 0.0f64;
    let mut max_term = 0.0f64;
    let push = |v: f64, acc: &mut f64, max_term: &mut f64| {
        if infinite {
            *max_term = max_term.max(v.abs());
        } else {
            *acc += v.abs().powf(p);
        }
    };

    let val = |lvl: usize, s: usize| u.at(grid, lvl, s);
    let has = |lvl: usize, s: usize| set.contains(&(lvl, s));

    for node in subdomain {
        let (lvl, s) = (node.level, node.sflat);
        let here = val(lvl, s);
        let mut terms: Vec<f64> = vec![here];

        // Time difference: forward when available, else backward.
        if lvl + 1 < grid.num_time_levels() && has(lvl + 1, s) {
            terms.push((val(lvl + 1, s) - here) / dt);
        } else if lvl > 0 && has(lvl - 1, s) {
            terms.push((here - val(lvl - 1, s)) / dt);
        }

        for axis in 0..d {
            let plus = grid.neighbor(s, axis, 1).filter(|&q| has(lvl, q));
            let minus = grid.neighbor(s, axis, -1).filter(|&q| has(lvl, q));
            let hi = h[axis];
            // First difference.
            match (plus, minus) {
                (Some(pp), Some(mm)) => {
                    terms.push((val(lvl, pp) - val(lvl, mm)) / (2.0 * hi))
                }
                (Some(pp), None) => terms.push((val(lvl, pp) - here) / hi),
                (None, Some(mm)) => terms.push((here - val(lvl, mm)) / hi),
                (None, None) => {}
            }
            // Pure second difference, one-sided from same-side pairs.
            if let (Some(pp), Some(mm)) = (plus, minus) {
                terms.push((val(lvl, pp) - 2.0 * here + val(lvl, mm)) / (hi * hi));
            } else if let Some(pp) = plus {
                if let Some(pp2) = grid.neighbor(pp, axis, 1).filter(|&q| has(lvl, q)) {
                    terms.push((val(lvl, pp2) - 2.0 * val(lvl, pp) + here) / (hi * hi));
                }
            } else if let Some(mm) = minus {
                if let Some(mm2) = grid.neighbor(mm, axis, -1).filter(|&q| has(lvl, q)) {
                    terms.push((here - 2.0 * val(lvl, mm) + val(lvl, mm2)) / (hi * hi));
                }
            }
            // Mixed differences with every other axis.
            for other in axis + 1..d {
                let ho = h[other];
                let corner = |da: i32, db: i32| -> Option<usize> {
                    grid.neighbor(s, axis, da)
                        .and_then(|q| grid.neighbor(q, other, db))
                        .filter(|&q| has(lvl, q))
                };
                if let (Some(app), Some(apm), Some(amp), Some(amm)) =
                    (corner(1, 1), corner(1, -1), corner(-1, 1), corner(-1, -1))
                {
                    let mixed = (val(lvl, app) - val(lvl, apm) - val(lvl, amp)
                        + val(lvl, amm))
                        / (4.0 * hi * ho);
                    // Once per ordered pair (i, j) and (j, i).
                    terms.push(mixed);
                    terms.push(mixed);
                }
            }
        }
        for v in terms {
            push(v, &mut acc, &mut max_term);
        }
    }
    if infinite {
        Ok(max_term)
    } else {
        Ok((acc * weight).powf(1.0 / p))
    }
}

/// Ordering check between a candidate subsolution u and supersolution v.
/// Premises (u has residual ≥ −tol inside, v has residual ≤ tol inside,
/// u ≤ v + tol on the boundary) are reported separately from the
/// conclusion (u ≤ v + tol everywhere), so a failed premise is never
/// mistaken for a counterexample.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// max over interior nodes of −residual(u): > tol breaks the premise.
    pub sub_defect: f64,
    /// max over interior nodes of residual(v): > tol breaks the premise.
    pub super_defect: f64,
    /// max over boundary nodes of u − v.
    pub boundary_defect: f64,
    /// max over all nodes of u − v.
    pub conclusion_excess: f64,
    pub worst_node: Option<NodeId>,
    pub tol: f64,
}

impl ComparisonReport {
    pub fn premises_hold(&self) -> bool {
        self.sub_defect <= self.tol
            && self.super_defect <= self.tol
            && self.boundary_defect <= self.tol
    }

    pub fn conclusion_holds(&self) -> bool {
        self.conclusion_excess <= self.tol
    }

    /// False only on a genuine counterexample: premises hold, ordering fails.
    pub fn passed(&self) -> bool {
        !self.premises_hold() || self.conclusion_holds()
    }
}

pub fn check_comparison(
    dop: &DiscreteOperator,
    u: &GridFunction,
    v: &GridFunction,
    g: &GridFunction,
    tol: f64,
) -> Result<ComparisonReport> {
    let grid = dop.grid();
    // Passing the field itself as boundary data zeroes the boundary rows,
    // leaving exactly the interior residual.
    let res_u = residual(dop, u, g, u)?;
    let res_v = residual(dop, v, g, v)?;
    let mut sub_defect = f64::NEG_INFINITY;
    let mut super_defect = f64::NEG_INFINITY;
    let mut boundary_defect = f64::NEG_INFINITY;
    let mut conclusion_excess = f64::NEG_INFINITY;
    let mut worst_node = None;
    for node in grid.non_exterior_nodes() {
        let k = grid.compact(node.level, node.sflat).unwrap();
        let diff = u.at(grid, node.level, node.sflat) - v.at(grid, node.level, node.sflat);
        if diff > conclusion_excess {
            conclusion_excess = diff;
            worst_node = Some(node);
        }
        match grid.classify(node.level, node.sflat) {
            NodeClass::Interior => {
                sub_defect = sub_defect.max(-res_u.values()[k]);
                super_defect = super_defect.max(res_v.values()[k]);
            }
            _ => boundary_defect = boundary_defect.max(diff),
        }
    }
    Ok(ComparisonReport {
        sub_defect,
        super_defect,
        boundary_defect,
        conclusion_excess,
        worst_node,
        tol,
    })
}

/// Separation between the solution and the obstacle at the obstacle's kink
/// nodes before the terminal time. Solutions should stay strictly above
/// upward kinks of the envelope; the margin quantifies by how much.
#[derive(Debug, Clone)]
pub struct KinkMarginReport {
    /// min over kink nodes of u − g; +∞ when the obstacle has no kinks.
    pub margin: f64,
    pub rows: Vec<(KinkNode, f64)>,
}

pub fn kink_margin(
    u: &GridFunction,
    family: &ObstacleFamily,
    grid: &SpaceTimeGrid,
) -> Result<KinkMarginReport> {
    u.check_grid(grid)?;
    let kinks = locate_kinks(family, grid)?;
    let (g, _) = obstacle_field(family, grid)?;
    let mut rows = Vec::with_capacity(kinks.len());
    let mut margin = f64::INFINITY;
    for kink in kinks {
        let node = kink.node;
        let gap = u.at(grid, node.level, node.sflat) - g.at(grid, node.level, node.sflat);
        margin = margin.min(gap);
        rows.push((kink, gap));
    }
    Ok(KinkMarginReport { margin, rows })
}

/// One refinement stage of a stability or estimate run.
#[derive(Debug, Clone)]
pub struct StageInfo {
    pub nodes_per_axis: Vec<usize>,
    pub num_time_levels: usize,
    pub probe_values: Vec<f64>,
}

/// Solve the same problem on successively refined grids and track the
/// solution at fixed probe points.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub stages: Vec<StageInfo>,
    /// max-over-probes distance between consecutive stages.
    pub consecutive: Vec<f64>,
    /// max-over-probes distance from each stage to the last one.
    pub to_final: Vec<f64>,
}

impl StabilityReport {
    pub fn settled_within(&self, target: f64) -> bool {
        self.consecutive.last().map_or(true, |&d| d <= target)
    }
}

/// Run ≥ 2 refinement stages of the direct solver and sample each solution
/// at the given probe points, which must be nodes of every grid in the
/// ladder (put them on the coarsest grid and refine by the same factor).
pub fn stability_run(
    op: &BellmanOperator,
    family: &ObstacleFamily,
    b: &ScalarField,
    base: &SpaceTimeGrid,
    factor: usize,
    stages: usize,
    probes: &[(f64, Vec<f64>)],
    params: &SolveParams,
) -> Result<StabilityReport> {
    if stages < 2 {
        return Err(Error::InvalidParameter(format!(
            "a stability ladder needs at least 2 stages, got {stages}"
        )));
    }
    if probes.is_empty() {
        return Err(Error::InvalidParameter(
            "no probe points given".into(),
        ));
    }
    let mut owned: Vec<SpaceTimeGrid> = Vec::with_capacity(stages - 1);
    for s in 1..stages {
        let prev: &SpaceTimeGrid = if s == 1 { base } else { owned.last().unwrap() };
        let next = prev.refine(factor)?;
        owned.push(next);
    }
    let grids: Vec<&SpaceTimeGrid> = std::iter::once(base).chain(owned.iter()).collect();
    let mut infos: Vec<StageInfo> = Vec::with_capacity(stages);
    for &grid in &grids {
        let dop = assemble(op, grid)?;
        let (g, _) = obstacle_field(family, grid)?;
        let bf = GridFunction::from_fn(grid, |t, x| b(t, x))?;
        let (u, _) = solve_direct(&dop, &g, &bf, params)?;
        let mut probe_values = Vec::with_capacity(probes.len());
        for (t, x) in probes {
            let node = grid.locate_node(*t, x, 1e-9).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "probe point (t = {t}, x = {x:?}) is not a node of the \
                     {:?}-point grid",
                    grid.nodes_per_axis()
                ))
            })?;
            probe_values.push(u.at(grid, node.level, node.sflat));
        }
        infos.push(StageInfo {
            nodes_per_axis: grid.nodes_per_axis().to_vec(),
            num_time_levels: grid.num_time_levels(),
            probe_values,
        });
    }
    let dist = |a: &StageInfo, b: &StageInfo| {
        a.probe_values
            .iter()
            .zip(&b.probe_values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    let consecutive = infos.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    let last = infos.last().unwrap().clone();
    let to_final = infos.iter().map(|s| dist(s, &last)).collect();
    Ok(StabilityReport {
        stages: infos,
        consecutive,
        to_final,
    })
}

/// One stage of the interior-estimate check.
#[derive(Debug, Clone)]
pub struct EstimateStage {
    pub nodes_per_axis: Vec<usize>,
    pub num_time_levels: usize,
    /// Interior Sobolev norm of the solution over the margin subgrid.
    pub norm: f64,
    /// 1 + sup|g| + ‖growth‖_p + sup|b|.
    pub denom: f64,
    /// norm / denom: the constant the interior estimate says stays bounded.
    pub c_fitted: f64,
}

/// The fitted interior-estimate constants across a refinement ladder. A
/// bounded ratio max/min is evidence that the interior norm is controlled
/// by the data norms uniformly in the grid.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub stages: Vec<EstimateStage>,
    pub ratio: f64,
}

pub fn interior_estimate_check(
    op: &BellmanOperator,
    family: &ObstacleFamily,
    b: &ScalarField,
    base: &SpaceTimeGrid,
    margin: f64,
    p: f64,
    factor: usize,
    stages: usize,
    params: &SolveParams,
) -> Result<EstimateReport> {
    if stages < 2 {
        return Err(Error::InvalidParameter(format!(
            "an estimate ladder needs at least 2 stages, got {stages}"
        )));
    }
    let mut owned: Vec<SpaceTimeGrid> = Vec::with_capacity(stages - 1);
    for s in 1..stages {
        let prev: &SpaceTimeGrid = if s == 1 { base } else { owned.last().unwrap() };
        let next = prev.refine(factor)?;
        owned.push(next);
    }
    let grids: Vec<&SpaceTimeGrid> = std::iter::once(base).chain(owned.iter()).collect();
    let mut out = Vec::with_capacity(stages);
    for &grid in &grids {
        let sub = grid.interior_subgrid(margin)?;
        if sub.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "margin {margin} leaves no interior nodes on the \
                 {:?}-point grid",
                grid.nodes_per_axis()
            )));
        }
        let dop = assemble(op, grid)?;
        let (g, _) = obstacle_field(family, grid)?;
        let bf = GridFunction::from_fn(grid, |t, x| b(t, x))?;
        let (u, _) = solve_direct(&dop, &g, &bf, params)?;
        let norm = discrete_sobolev_norm(&u, grid, p, &sub)?;

        let sup_g = g.sup();
        let mut sup_b = 0.0f64;
        for node in grid.non_exterior_nodes() {
            if grid.classify(node.level, node.sflat) != NodeClass::Interior {
                sup_b = sup_b.max(bf.at(grid, node.level, node.sflat).abs());
            }
        }
        let growth = GridFunction::from_fn(grid, |t, x| op.growth_at(t, x).unwrap_or(0.0))?;
        let growth_norm = if p.is_infinite() {
            growth.sup()
        } else {
            let w = grid.dt() * grid.spacings().iter().product::<f64>();
            (growth
                .values()
                .iter()
                .map(|v| v.abs().powf(p))
                .sum::<f64>()
                * w)
                .powf(1.0 / p)
        };
        let denom = 1.0 + sup_g + growth_norm + sup_b;
        out.push(EstimateStage {
            nodes_per_axis: grid.nodes_per_axis().to_vec(),
            num_time_levels: grid.num_time_levels(),
            norm,
            denom,
            c_fitted: norm / denom,
        });
    }
    let max = out.iter().map(|s| s.c_fitted).fold(f64::NEG_INFINITY, f64::max);
    let min = out.iter().map(|s| s.c_fitted).fold(f64::INFINITY, f64::min);
    Ok(EstimateReport {
        stages: out,
        ratio: max / min.max(f64::MIN_POSITIVE),
    })
}

/// Empirical modulus of continuity of a grid function: for each radius in
/// a ladder of max-spacing multiples, the largest |u(z) − u(z')| over node
/// pairs whose time distance and every coordinate distance are ≤ r.
#[derive(Debug, Clone)]
pub struct ModulusReport {
    pub radii: Vec<f64>,
    pub omega: Vec<f64>,
}

pub fn modulus_probe(
    u: &GridFunction,
    grid: &SpaceTimeGrid,
    rungs: usize,
) -> Result<ModulusReport> {
    u.check_grid(grid)?;
    if rungs == 0 {
        return Err(Error::InvalidParameter("need at least one radius".into()));
    }
    let base = grid
        .spacings()
        .iter()
        .copied()
        .fold(grid.dt(), f64::max);
    let radii: Vec<f64> = (1..=rungs).map(|k| k as f64 * base).collect();
    let nodes: Vec<NodeId> = grid.non_exterior_nodes().collect();
    let coords: Vec<(f64, Vec<f64>)> = nodes
        .iter()
        .map(|n| (grid.time(n.level), grid.spatial_coords(n.sflat)))
        .collect();
    let vals: Vec<f64> = nodes
        .iter()
        .map(|n| u.at(grid, n.level, n.sflat))
        .collect();
    let work = nodes.len() * nodes.len();
    if work > 400_000_000 {
        return Err(Error::GridTooLarge(format!(
            "modulus probe over {} nodes needs {work} pairs; use a coarser grid",
            nodes.len()
        )));
    }
    let omega: Vec<f64> = radii
        .par_iter()
        .map(|&r| {
            let mut w = 0.0f64;
            let rr = r + 1e-12;
            for i in 0..nodes.len() {
                for j in i + 1..nodes.len() {
                    let (ti, xi) = &coords[i];
                    let (tj, xj) = &coords[j];
                    if (ti - tj).abs() > rr {
                        continue;
                    }
                    if xi.iter().zip(xj).any(|(a, b)| (a - b).abs() > rr) {
                        continue;
                    }
                    w = w.max((vals[i] - vals[j]).abs());
                }
            }
            w
        })
        .collect();
    Ok(ModulusReport { radii, omega })
}

/// Outcome of randomized ordering tests built from monotone data moves.
#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub instances: usize,
    /// Pairs whose premises held numerically (should be all of them).
    pub premises_held: usize,
    /// Genuine counterexamples: premises held, ordering failed.
    pub conclusion_violations: usize,
    /// Worst conclusion excess over premise-satisfying pairs.
    pub worst_excess: f64,
}

/// Build premise-satisfying (sub, super) pairs by solving with ordered
/// data: v solves with the obstacle and boundary data raised (and u
/// optionally lowered by a constant), so u is a subsolution and v a
/// supersolution of the same problem. Instances run in parallel.
pub fn fuzz_comparison(
    op: &BellmanOperator,
    grid: &SpaceTimeGrid,
    instances: usize,
    seed: u64,
    params: &SolveParams,
) -> Result<FuzzReport> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    if instances == 0 {
        return Err(Error::InvalidParameter("no instances requested".into()));
    }
    let dop = assemble(op, grid)?;
    let results: Vec<Result<(bool, bool, f64)>> = (0..instances)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let dim = grid.dim();
            let slope: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let lift = rng.random_range(-0.4..0.0);
            let s2 = slope.clone();
            let g = GridFunction::from_fn(grid, |_, x| {
                s2.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + lift
            })?;
            let wave = rng.random_range(0.5..2.0);
            let amp = rng.random_range(0.0..0.3);
            let s3 = slope.clone();
            let b = GridFunction::from_fn(grid, |t, x| {
                let lin = s3.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + lift;
                lin.max(0.0) + amp * (wave * (t + x[0])).cos().abs()
            })?;
            let raise_g = rng.random_range(0.0..0.3);
            let raise_b = rng.random_range(raise_g..raise_g + 0.3);
            let g_hi = GridFunction::from_values(
                grid,
                g.values().iter().map(|v| v + raise_g).collect(),
            )?;
            let b_hi = GridFunction::from_values(
                grid,
                b.values().iter().map(|v| v + raise_b).collect(),
            )?;
            let lower = rng.random_range(0.0..0.2);
            let (u, _) = solve_direct(&dop, &g, &b, params)?;
            let (v, _) = solve_direct(&dop, &g_hi, &b_hi, params)?;
            let u_low = GridFunction::from_values(
                grid,
                u.values().iter().map(|x| x - lower).collect(),
            )?;
            // u_low is a subsolution and v a supersolution for the obstacle
            // g (lowering by a constant keeps the residual nonnegative
            // because the zeroth-order coefficients are ≤ 0).
            let report = check_comparison(&dop, &u_low, &v, &g, params.tol * 10.0)?;
            Ok((
                report.premises_hold(),
                report.premises_hold() && !report.conclusion_holds(),
                if report.premises_hold() {
                    report.conclusion_excess
                } else {
                    f64::NEG_INFINITY
                },
            ))
        })
        .collect();
    let mut premises_held = 0;
    let mut conclusion_violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for r in results {
        let (ok, bad, excess) = r?;
        premises_held += ok as usize;
        conclusion_violations += bad as usize;
        worst = worst.max(excess);
    }
    Ok(FuzzReport {
        instances,
        premises_held,
        conclusion_violations,
        worst_excess: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use crate::linalg::SymMat;
    use crate::obstacles::ObstaclePiece;
    use crate::operators::{Control, EllipticityEnvelope};
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

    fn cap_piece() -> ObstaclePiece {
        ObstaclePiece::new(
            "cap",
            Arc::new(|_, x: &[f64]| 1.0 - x[0] * x[0]),
            Arc::new(|_, _: &[f64]| 0.0),
            Arc::new(|_, x: &[f64]| vec![-2.0 * x[0]]),
            Arc::new(|_, _: &[f64]| SymMat::from_diag(&[-2.0])),
        )
    }

    fn abs_family() -> ObstacleFamily {
        let up = ObstaclePiece::new(
            "up",
            Arc::new(|_, x: &[f64]| x[0]),
            Arc::new(|_, _: &[f64]| 0.0),
            Arc::new(|_, _: &[f64]| vec![1.0]),
            Arc::new(|_, _: &[f64]| SymMat::zeros(1)),
        );
        let down = ObstaclePiece::new(
            "down",
            Arc::new(|_, x: &[f64]| -x[0]),
            Arc::new(|_, _: &[f64]| 0.0),
            Arc::new(|_, _: &[f64]| vec![-1.0]),
            Arc::new(|_, _: &[f64]| SymMat::zeros(1)),
        );
        ObstacleFamily::new(vec![up, down]).unwrap()
    }

    #[test]
    fn sobolev_norm_matches_closed_form_for_quadratic() {
        // u = x² on [0,1]×[−1,1] with p = 4:
        // ∫(x⁸ + 0 + (2x)⁴ + 2⁴) dx dt = 2/9 + 32/5 + 32 = 1738/45.
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[401], 101, 1.0).unwrap();
        let u = GridFunction::from_fn(&grid, |_, x| x[0] * x[0]).unwrap();
        let all: Vec<NodeId> = grid.non_exterior_nodes().collect();
        let norm = discrete_sobolev_norm(&u, &grid, 4.0, &all).unwrap();
        let exact = (1738.0f64 / 45.0).powf(0.25);
        assert!(
            (norm - exact).abs() / exact < 0.01,
            "norm {norm} vs closed form {exact}"
        );
    }

    #[test]
    fn sobolev_norm_rejects_bad_exponent_and_empty_set() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 4, 1.0).unwrap();
        let u = GridFunction::zeros(&grid);
        let all: Vec<NodeId> = grid.non_exterior_nodes().collect();
        // d = 1 needs p > 3.
        assert!(discrete_sobolev_norm(&u, &grid, 3.0, &all).is_err());
        assert!(discrete_sobolev_norm(&u, &grid, 2.0, &all).is_err());
        assert!(discrete_sobolev_norm(&u, &grid, 4.0, &[]).is_err());
        assert!(discrete_sobolev_norm(&u, &grid, 3.5, &all).is_ok());
        assert!(discrete_sobolev_norm(&u, &grid, f64::INFINITY, &all).is_ok());
    }

    #[test]
    fn sobolev_norm_is_homogeneous_with_triangle_inequality() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = build_grid(&[(-1.0, 1.0), (0.0, 1.0)], &[], &[7, 6], 4, 1.0).unwrap();
        let all: Vec<NodeId> = grid.non_exterior_nodes().collect();
        for &p in &[4.5, 7.0, f64::INFINITY] {
            let u = GridFunction::from_fn(&grid, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let v = GridFunction::from_fn(&grid, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let nu = discrete_sobolev_norm(&u, &grid, p, &all).unwrap();
            let scaled = GridFunction::from_values(
                &grid,
                u.values().iter().map(|x| 2.5 * x).collect(),
            )
            .unwrap();
            let ns = discrete_sobolev_norm(&scaled, &grid, p, &all).unwrap();
            assert!((ns - 2.5 * nu).abs() <= 1e-10 * (1.0 + ns));
            let sum = GridFunction::from_values(
                &grid,
                u.values()
                    .iter()
                    .zip(v.values())
                    .map(|(a, b)| a + b)
                    .collect(),
            )
            .unwrap();
            let nsum = discrete_sobolev_norm(&sum, &grid, p, &all).unwrap();
            let nv = discrete_sobolev_norm(&v, &grid, p, &all).unwrap();
            assert!(nsum <= nu + nv + 1e-10);
        }
    }

    #[test]
    fn sobolev_norm_of_constant_is_scaled_volume() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[11], 6, 1.0).unwrap();
        let c = 3.0;
        let u = GridFunction::constant(&grid, c);
        let all: Vec<NodeId> = grid.non_exterior_nodes().collect();
        let p = 5.0;
        let volume = grid.dt()
            * grid.spacings()[0]
            * (grid.non_exterior_count() as f64);
        let expect = c * volume.powf(1.0 / p);
        let norm = discrete_sobolev_norm(&u, &grid, p, &all).unwrap();
        assert!((norm - expect).abs() < 1e-12);
        let ninf = discrete_sobolev_norm(&u, &grid, f64::INFINITY, &all).unwrap();
        assert!((ninf - c).abs() < 1e-14);
    }

    #[test]
    fn comparison_report_separates_premises_from_conclusion() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let g = GridFunction::constant(&grid, -1.0);
        let b = GridFunction::from_fn(&grid, |_, x| 0.3 * x[0].cos()).unwrap();
        let params = SolveParams::default();
        let (u, _) = solve_direct(&dop, &g, &b, &params).unwrap();
        // A solution compared with itself: premises hold, conclusion holds.
        let r = check_comparison(&dop, &u, &u, &g, 1e-9).unwrap();
        assert!(r.premises_hold());
        assert!(r.conclusion_holds());
        assert!(r.passed());
        // u vs u − 1: the boundary premise fails (u ≰ u − 1 on the
        // boundary), so the failed conclusion is not a counterexample.
        let low = GridFunction::from_values(
            &grid,
            u.values().iter().map(|x| x - 1.0).collect(),
        )
        .unwrap();
        let r2 = check_comparison(&dop, &u, &low, &g, 1e-9).unwrap();
        assert!(!r2.premises_hold());
        assert!(r2.boundary_defect > 0.5);
        assert!(!r2.conclusion_holds());
        assert!(r2.passed());
        assert!(r2.worst_node.is_some());
    }

    #[test]
    fn kink_margin_positive_on_tent_obstacle() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[41], 9, 1.0).unwrap();
        let op = heat_op();
        let dop = assemble(&op, &grid).unwrap();
        let family = abs_family();
        let (g, _) = obstacle_field(&family, &grid).unwrap();
        let b = GridFunction::from_fn(&grid, |_, x| x[0].abs()).unwrap();
        let (u, _) = solve_direct(&dop, &g, &b, &SolveParams::default()).unwrap();
        let report = kink_margin(&u, &family, &grid).unwrap();
        assert!(!report.rows.is_empty());
        assert!(
            report.margin > 0.0,
            "solution should separate from the kink, margin {}",
            report.margin
        );
        // All kinks sit at x = 0 before the terminal time.
        for (kink, gap) in &report.rows {
            assert!(grid.spatial_coords(kink.node.sflat)[0].abs() < 1e-12);
            assert!(*gap >= report.margin);
        }
        // A smooth single-piece family has no kinks at all.
        let smooth = ObstacleFamily::new(vec![cap_piece()]).unwrap();
        let r2 = kink_margin(&u, &smooth, &grid).unwrap();
        assert!(r2.rows.is_empty());
        assert_eq!(r2.margin, f64::INFINITY);
    }

    #[test]
    fn stability_ladder_settles_under_refinement() {
        let op = heat_op();
        let family = ObstacleFamily::new(vec![cap_piece()]).unwrap();
        let b: ScalarField = Arc::new(|t: f64, x: &[f64]| {
            if (1.0 - t).abs() < 1e-12 {
                1.0 - x[0] * x[0]
            } else {
                0.0
            }
        });
        let base = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let probes = vec![(0.5, vec![0.0]), (0.5, vec![0.5]), (0.0, vec![0.0])];
        let report = stability_run(
            &op,
            &family,
            &b,
            &base,
            2,
            4,
            &probes,
            &SolveParams::default(),
        )
        .unwrap();
        assert_eq!(report.stages.len(), 4);
        assert_eq!(report.consecutive.len(), 3);
        // Successive changes shrink and the ladder ends tight.
        for w in report.consecutive.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "distances {:?}", report.consecutive);
        }
        assert!(report.settled_within(5e-3), "{:?}", report.consecutive);
        assert_eq!(*report.to_final.last().unwrap(), 0.0);

        // A probe off the lattice is rejected.
        let bad = stability_run(
            &op,
            &family,
            &b,
            &base,
            2,
            2,
            &[(0.123, vec![0.0])],
            &SolveParams::default(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn interior_estimate_constant_stays_bounded() {
        let op = heat_op();
        let family = ObstacleFamily::new(vec![cap_piece()]).unwrap();
        let b: ScalarField = Arc::new(|t: f64, x: &[f64]| {
            if (1.0 - t).abs() < 1e-12 {
                1.0 - x[0] * x[0]
            } else {
                0.0
            }
        });
        let base = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let report = interior_estimate_check(
            &op,
            &family,
            &b,
            &base,
            0.25,
            4.0,
            2,
            3,
            &SolveParams::default(),
        )
        .unwrap();
        assert_eq!(report.stages.len(), 3);
        assert!(report.ratio >= 1.0);
        assert!(
            report.ratio <= 10.0,
            "fitted constants should be grid-stable, ratio {}",
            report.ratio
        );
        for s in &report.stages {
            assert!(s.norm.is_finite() && s.norm > 0.0);
            assert!(s.denom >= 1.0);
        }
        // A margin swallowing the whole domain is an error.
        assert!(interior_estimate_check(
            &op,
            &family,
            &b,
            &base,
            10.0,
            4.0,
            2,
            2,
            &SolveParams::default(),
        )
        .is_err());
    }

    #[test]
    fn modulus_probe_is_monotone_and_linear_for_linear_data() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[21], 11, 1.0).unwrap();
        let u = GridFunction::from_fn(&grid, |_, x| 0.7 * x[0]).unwrap();
        let report = modulus_probe(&u, &grid, 4).unwrap();
        assert_eq!(report.radii.len(), 4);
        for w in report.omega.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // For u = 0.7x the modulus at radius r = k·h is exactly 0.7·k·h
        // once r ≥ h exceeds dt; here max spacing is h = 0.1 = dt.
        let h = 0.1;
        for (k, om) in report.omega.iter().enumerate() {
            let expect = 0.7 * (k + 1) as f64 * h;
            assert!((om - expect).abs() < 1e-12, "rung {k}: {om} vs {expect}");
        }
    }

    #[test]
    fn fuzz_finds_no_ordering_counterexamples() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[9], 5, 1.0).unwrap();
        let op = heat_op();
        let report = fuzz_comparison(&op, &grid, 12, 99, &SolveParams::default()).unwrap();
        assert_eq!(report.instances, 12);
        assert_eq!(report.premises_held, 12);
        assert_eq!(report.conclusion_violations, 0);
        assert!(report.worst_excess <= 1e-7);
    }
}
