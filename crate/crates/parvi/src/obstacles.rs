//! Obstacle families g = max over pieces g^a, their kinks, and the
//! compatibility fields h^a = −g^a_t − F(t, x, g^a, g^a_x, g^a_xx).
//!
//! Each piece carries its own derivative samplers; h is always assembled
//! from those samplers, never from numerical differencing, so penalty
//! constructions are not polluted by discretization error. Countable
//! families enter through a generator and are truncated to finitely many
//! pieces with a recorded probe gap.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{GridFunction, NodeClass, NodeId, SpaceTimeGrid};
use crate::linalg::SymMat;
use crate::operators::{BellmanOperator, MatrixField, ScalarField, VectorField};

/// One obstacle piece with value and derivative samplers over (t, x).
#[derive(Clone)]
pub struct ObstaclePiece {
    label: String,
    g: ScalarField,
    g_t: ScalarField,
    g_x: VectorField,
    g_xx: MatrixField,
    norm_bound: Option<f64>,
}

/// A piece frozen at one point: value, time derivative, gradient, Hessian.
#[derive(Debug, Clone)]
pub struct PieceSample {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: SymMat,
}

impl ObstaclePiece {
    pub fn new(
        label: impl Into<String>,
        g: ScalarField,
        g_t: ScalarField,
        g_x: VectorField,
        g_xx: MatrixField,
    ) -> Self {
        ObstaclePiece {
            label: label.into(),
            g,
            g_t,
            g_x,
            g_xx,
            norm_bound: None,
        }
    }

    /// Attach a declared norm bound, reported by the estimate checks.
    pub fn with_norm_bound(mut self, bound: f64) -> Self {
        self.norm_bound = Some(bound);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn norm_bound(&self) -> Option<f64> {
        self.norm_bound
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.g)(t, x)
    }

    /// Value plus all derivative samplers at one point, with finiteness
    /// checks (missing table rows surface as NaN).
    pub fn sample(&self, dim: usize, t: f64, x: &[f64]) -> Result<PieceSample> {
        let value = (self.g)(t, x);
        let dt = (self.g_t)(t, x);
        let grad = (self.g_x)(t, x);
        let hess = (self.g_xx)(t, x);
        if grad.len() != dim || hess.dim() != dim {
            return Err(Error::InvalidObstacle(format!(
                "piece {}: derivative dimensions do not match the {dim}-d domain",
                self.label
            )));
        }
        if !value.is_finite()
            || !dt.is_finite()
            || grad.iter().any(|v| !v.is_finite())
            || !hess.is_finite()
        {
            return Err(Error::NonFiniteSample(format!(
                "piece {}: non-finite sample at t={t}, x={x:?}",
                self.label
            )));
        }
        Ok(PieceSample {
            value,
            dt,
            grad,
            hess,
        })
    }
}

impl fmt::Debug for ObstaclePiece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObstaclePiece")
            .field("label", &self.label)
            .field("norm_bound", &self.norm_bound)
            .finish()
    }
}

/// Metadata recorded when a countable family is truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationInfo {
    /// Number of pieces kept.
    pub n: usize,
    /// Number of pieces in the probe family used to estimate the gap.
    pub probe_n: usize,
    /// max over grid nodes of (probe-family value − kept-family value).
    pub probe_gap: f64,
}

/// Ordered, nonempty list of obstacle pieces; g = max over them.
#[derive(Debug, Clone)]
pub struct ObstacleFamily {
    pieces: Vec<ObstaclePiece>,
    truncation: Option<TruncationInfo>,
}

impl ObstacleFamily {
    pub fn new(pieces: Vec<ObstaclePiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidObstacle(
                "obstacle family needs at least one piece".into(),
            ));
        }
        Ok(ObstacleFamily {
            pieces,
            truncation: None,
        })
    }

    pub fn pieces(&self) -> &[ObstaclePiece] {
        &self.pieces
    }

    pub fn truncation(&self) -> Option<&TruncationInfo> {
        self.truncation.as_ref()
    }

    /// Family with the first `upto` pieces (used by the incremental solver).
    pub fn prefix(&self, upto: usize) -> Result<ObstacleFamily> {
        if upto == 0 || upto > self.pieces.len() {
            return Err(Error::InvalidParameter(format!(
                "prefix length {upto} outside 1..={}",
                self.pieces.len()
            )));
        }
        ObstacleFamily::new(self.pieces[..upto].to_vec())
    }
}

/// Evaluate g = max over pieces at one non-exterior node; ties go to the
/// first piece in list order.
pub fn eval_obstacle<'f>(
    family: &'f ObstacleFamily,
    grid: &SpaceTimeGrid,
    node: NodeId,
) -> Result<(f64, &'f str)> {
    if grid.compact(node.level, node.sflat).is_none() {
        return Err(Error::InvalidParameter(format!(
            "node {node:?} is exterior or out of range"
        )));
    }
    let t = grid.time(node.level);
    let x = grid.spatial_coords(node.sflat);
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (idx, piece) in family.pieces.iter().enumerate() {
        let v = piece.value(t, &x);
        if !v.is_finite() {
            return Err(Error::NonFiniteSample(format!(
                "piece {}: non-finite value at t={t}, x={x:?}",
                piece.label()
            )));
        }
        if v > best {
            best = v;
            best_idx = idx;
        }
    }
    Ok((best, family.pieces[best_idx].label()))
}

/// Evaluate the whole family on the grid: obstacle values plus the argmax
/// piece index at every non-exterior node, in compact node order.
pub fn obstacle_field(
    family: &ObstacleFamily,
    grid: &SpaceTimeGrid,
) -> Result<(GridFunction, Vec<usize>)> {
    let count = grid.non_exterior_count();
    let mut values = vec![f64::NEG_INFINITY; count];
    let mut argmax = vec![0usize; count];
    for (k, node) in grid.non_exterior_nodes().enumerate() {
        let t = grid.time(node.level);
        let x = grid.spatial_coords(node.sflat);
        for (idx, piece) in family.pieces.iter().enumerate() {
            let v = piece.value(t, &x);
            if !v.is_finite() {
                return Err(Error::NonFiniteSample(format!(
                    "piece {}: non-finite value at t={t}, x={x:?}",
                    piece.label()
                )));
            }
            if v > values[k] {
                values[k] = v;
                argmax[k] = idx;
            }
        }
    }
    Ok((GridFunction::from_values(grid, values)?, argmax))
}

/// Sample a single piece on the whole grid.
pub fn piece_field(piece: &ObstaclePiece, grid: &SpaceTimeGrid) -> Result<GridFunction> {
    GridFunction::from_fn(grid, |t, x| piece.value(t, x))
}

/// Keep the first `n` pieces of a countable family enumerated by
/// `generator` (index 0, 1, …), recording a probe gap against the family
/// with up to 2n pieces. Errors if the generator runs out before `n`.
pub fn truncate_family(
    mut generator: impl FnMut(usize) -> Option<ObstaclePiece>,
    n: usize,
    grid: &SpaceTimeGrid,
) -> Result<ObstacleFamily> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "truncation length must be ≥ 1".into(),
        ));
    }
    let mut pieces = Vec::with_capacity(n);
    for i in 0..n {
        match generator(i) {
            Some(p) => pieces.push(p),
            None => {
                return Err(Error::InvalidObstacle(format!(
                    "family generator exhausted after {i} pieces, {n} requested"
                )))
            }
        }
    }
    let kept = ObstacleFamily::new(pieces)?;
    let mut probe_pieces = kept.pieces.clone();
    for i in n..2 * n {
        match generator(i) {
            Some(p) => probe_pieces.push(p),
            None => break,
        }
    }
    let probe_n = probe_pieces.len();
    let probe = ObstacleFamily::new(probe_pieces)?;
    let (g_kept, _) = obstacle_field(&kept, grid)?;
    let (g_probe, _) = obstacle_field(&probe, grid)?;
    let probe_gap = g_kept
        .values()
        .iter()
        .zip(g_probe.values())
        .map(|(a, b)| b - a)
        .fold(0.0f64, f64::max);
    Ok(ObstacleFamily {
        truncation: Some(TruncationInfo {
            n,
            probe_n,
            probe_gap,
        }),
        ..kept
    })
}

/// An interior node where the obstacle has a convex kink: the argmax piece
/// changes across a spatial edge and g has strictly positive discrete
/// curvature along that axis.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkNode {
    pub node: NodeId,
    pub axis: usize,
    /// Argmax labels at the node and at the differing neighbor.
    pub labels: (String, String),
}

/// Find convex kinks of g = max over pieces on the interior nodes.
///
/// A node is flagged when some axis neighbor carries a different argmax
/// piece and the centered second difference of g along that axis is
/// strictly positive. Flat stretches adjacent to an argmax change (second
/// difference zero) are not corners and are excluded; every flagged node
/// satisfies the nonnegative-curvature test a fortiori.
pub fn locate_kinks(family: &ObstacleFamily, grid: &SpaceTimeGrid) -> Result<Vec<KinkNode>> {
    let (g, argmax) = obstacle_field(family, grid)?;
    let mut kinks = Vec::new();
    for node in grid.non_exterior_nodes() {
        if grid.classify(node.level, node.sflat) != NodeClass::Interior {
            continue;
        }
        let k0 = grid.compact(node.level, node.sflat).unwrap();
        let here = argmax[k0];
        'axes: for axis in 0..grid.dim() {
            let sm = grid.neighbor(node.sflat, axis, -1).unwrap();
            let sp = grid.neighbor(node.sflat, axis, 1).unwrap();
            let km = grid.compact(node.level, sm).unwrap();
            let kp = grid.compact(node.level, sp).unwrap();
            for &kn in &[km, kp] {
                if argmax[kn] == here {
                    continue;
                }
                let (gm, g0, gp) = (g.values()[km], g.values()[k0], g.values()[kp]);
                let second = gm - 2.0 * g0 + gp;
                let slack = 1e-12 * (1.0 + gm.abs() + g0.abs() + gp.abs());
                if second > slack {
                    kinks.push(KinkNode {
                        node,
                        axis,
                        labels: (
                            family.pieces[here].label().to_string(),
                            family.pieces[argmax[kn]].label().to_string(),
                        ),
                    });
                    break 'axes;
                }
            }
        }
    }
    Ok(kinks)
}

/// The compatibility field of one piece against an operator.
#[derive(Debug, Clone)]
pub struct CompatibilityField {
    /// h = −g_t − F(t, x, g, g_x, g_xx), nodewise from the piece samplers.
    pub h: GridFunction,
    /// Positive part h⁺ = max(h, 0).
    pub h_plus: GridFunction,
    /// Discrete L^p norm of h over the cylinder (cell weight dt·Πh_i).
    pub lp_norm: f64,
}

/// Compute h^a = −g^a_t − F(t, x, g^a, g^a_x, g^a_xx) on all non-exterior
/// nodes, its positive part, and its discrete L^p norm.
pub fn compatibility_h(
    piece: &ObstaclePiece,
    op: &BellmanOperator,
    grid: &SpaceTimeGrid,
    p: f64,
) -> Result<CompatibilityField> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "L^p norm needs p ≥ 1, got {p}"
        )));
    }
    let dim = grid.dim();
    let count = grid.non_exterior_count();
    let mut h_vals = Vec::with_capacity(count);
    for node in grid.non_exterior_nodes() {
        let t = grid.time(node.level);
        let x = grid.spatial_coords(node.sflat);
        let s = piece.sample(dim, t, &x)?;
        let (f_val, _) = op.eval_indexed(t, &x, s.value, &s.grad, &s.hess)?;
        h_vals.push(-s.dt - f_val);
    }
    let cell = grid.dt() * grid.spacings().iter().product::<f64>();
    let lp_norm = if p.is_infinite() {
        crate::linalg::sup_norm(&h_vals)
    } else {
        h_vals
            .iter()
            .map(|v| v.abs().powf(p) * cell)
            .sum::<f64>()
            .powf(1.0 / p)
    };
    let h_plus_vals: Vec<f64> = h_vals.iter().map(|v| v.max(0.0)).collect();
    Ok(CompatibilityField {
        h: GridFunction::from_values(grid, h_vals)?,
        h_plus: GridFunction::from_values(grid, h_plus_vals)?,
        lp_norm,
    })
}

/// Check g^a ≤ b + tol on every lateral-boundary and terminal-slice node,
/// for every piece.
pub fn check_boundary_compatibility(
    family: &ObstacleFamily,
    grid: &SpaceTimeGrid,
    b: &GridFunction,
    tol: f64,
) -> Result<()> {
    b.check_grid(grid)?;
    for node in grid.non_exterior_nodes() {
        match grid.classify(node.level, node.sflat) {
            NodeClass::LateralBoundary | NodeClass::TerminalSlice => {}
            _ => continue,
        }
        let t = grid.time(node.level);
        let x = grid.spatial_coords(node.sflat);
        let bv = b.at(grid, node.level, node.sflat);
        for piece in family.pieces() {
            let gv = piece.value(t, &x);
            if gv > bv + tol {
                return Err(Error::BoundaryIncompatible(format!(
                    "piece {} exceeds the boundary data at t={t}, x={x:?}: \
                     g = {gv}, b = {bv}, tol = {tol}",
                    piece.label()
                )));
            }
        }
    }
    Ok(())
}
