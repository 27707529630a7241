//! Space-time grids over box/polytope domains.
//!
//! The computational domain is the cylinder Y = [0,T) × X where X is a
//! product of open intervals optionally cut down by half-space constraints
//! n·x ≤ c. Data (Dirichlet values) live on the parabolic boundary
//! ∂Y = ({T} × X̄) ∪ ([0,T] × ∂X): the terminal slice plus the lateral
//! boundary. Time level `nt−1` is the terminal slice; t = 0 is an ordinary
//! interior time because the problem marches backward from T.
//!
//! Grids are uniform tensor products. Every node is classified as exactly one
//! of interior / lateral-boundary / terminal-slice / exterior; the exterior
//! class only appears when a half-space mask is present and carries no data.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Hard cap on total space-time nodes; build and refine fail beyond it.
pub const MAX_NODES: usize = 50_000_000;

static NEXT_GRID_ID: AtomicU64 = AtomicU64::new(1);

/// Closed half-space constraint n·x ≤ c.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl HalfSpace {
    fn norm(&self) -> f64 {
        self.normal.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn excess(&self, x: &[f64]) -> f64 {
        let dot: f64 = self.normal.iter().zip(x).map(|(n, xi)| n * xi).sum();
        dot - self.offset
    }

    /// Absolute tolerance for deciding whether a point sits on the plane.
    fn snap(&self, coord_scale: f64) -> f64 {
        let scale = self
            .offset
            .abs()
            .max(self.normal.iter().map(|v| v.abs()).sum::<f64>() * coord_scale)
            .max(1.0);
        1e-12 * scale
    }
}

/// Classification of a space-time node against the parabolic boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Interior,
    LateralBoundary,
    TerminalSlice,
    Exterior,
}

/// Spatial-only classification; the time level turns it into a [`NodeClass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpatialClass {
    Inner,
    Face,
    Exterior,
}

/// Address of a space-time node: time level plus flattened spatial index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub level: usize,
    pub sflat: usize,
}

/// Uniform tensor grid on [0,T] × (box ∩ half-spaces).
#[derive(Debug)]
pub struct SpaceTimeGrid {
    id: u64,
    dim: usize,
    bounds: Vec<(f64, f64)>,
    halfspaces: Vec<HalfSpace>,
    n: Vec<usize>,
    nt: usize,
    t_horizon: f64,
    h: Vec<f64>,
    dt: f64,
    strides: Vec<usize>,
    spatial_count: usize,
    spatial_class: Vec<SpatialClass>,
    /// Flattened spatial indices of non-exterior nodes, ascending.
    ne_spatial: Vec<usize>,
    /// Position of each spatial node in `ne_spatial`, or `u32::MAX`.
    ne_pos: Vec<u32>,
    /// Flattened spatial indices of inner (interior-class) nodes, ascending.
    inner_spatial: Vec<usize>,
    /// Position of each spatial node in `inner_spatial`, or `u32::MAX`.
    inner_pos: Vec<u32>,
}

/// Build a grid over the given box, optional half-space mask, and resolution.
///
/// `bounds` are per-axis open intervals (lo, hi); `n` are per-axis node
/// counts (each ≥ 3, endpoints included); `nt ≥ 2` time levels span [0, T].
pub fn build_grid(
    bounds: &[(f64, f64)],
    halfspaces: &[HalfSpace],
    n: &[usize],
    nt: usize,
    t_horizon: f64,
) -> Result<SpaceTimeGrid> {
    let dim = bounds.len();
    if dim == 0 {
        return Err(Error::InvalidDomain("no spatial axes given".into()));
    }
    if n.len() != dim {
        return Err(Error::InvalidDomain(format!(
            "bounds describe {dim} axes but n has {} entries",
            n.len()
        )));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::InvalidDomain(format!(
                "axis {i}: bounds ({lo}, {hi}) must be finite with positive extent"
            )));
        }
    }
    for (i, &ni) in n.iter().enumerate() {
        if ni < 3 {
            return Err(Error::InvalidDomain(format!(
                "axis {i}: need at least 3 nodes, got {ni}"
            )));
        }
    }
    if nt < 2 {
        return Err(Error::InvalidDomain(format!(
            "need at least 2 time levels, got {nt}"
        )));
    }
    if !(t_horizon.is_finite() && t_horizon > 0.0) {
        return Err(Error::InvalidDomain(format!(
            "horizon T = {t_horizon} must be finite and positive"
        )));
    }
    for (k, hs) in halfspaces.iter().enumerate() {
        if hs.normal.len() != dim {
            return Err(Error::InvalidDomain(format!(
                "half-space {k}: normal has {} entries, expected {dim}",
                hs.normal.len()
            )));
        }
        if !hs.offset.is_finite() || hs.normal.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDomain(format!(
                "half-space {k}: non-finite data"
            )));
        }
        if hs.norm() == 0.0 {
            return Err(Error::InvalidDomain(format!(
                "half-space {k}: zero normal vector"
            )));
        }
    }

    let spatial_count = n.iter().try_fold(1usize, |acc, &ni| {
        acc.checked_mul(ni).filter(|&t| t <= MAX_NODES)
    });
    let spatial_count = match spatial_count {
        Some(c) => c,
        None => {
            return Err(Error::GridTooLarge(format!(
                "spatial node count overflows the {MAX_NODES} budget"
            )))
        }
    };
    if spatial_count.saturating_mul(nt) > MAX_NODES {
        return Err(Error::GridTooLarge(format!(
            "{} space-time nodes exceed the {MAX_NODES} budget",
            spatial_count.saturating_mul(nt)
        )));
    }

    let h: Vec<f64> = bounds
        .iter()
        .zip(n)
        .map(|(&(lo, hi), &ni)| (hi - lo) / (ni - 1) as f64)
        .collect();
    let dt = t_horizon / (nt - 1) as f64;
    let mut strides = vec![1usize; dim];
    for i in (0..dim.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * n[i + 1];
    }

    let coord_scale = bounds
        .iter()
        .map(|&(lo, hi)| lo.abs().max(hi.abs()))
        .fold(1.0, f64::max);

    // First pass: exterior / on-plane flags per spatial node.
    let mut exterior = vec![false; spatial_count];
    let mut on_plane = vec![false; spatial_count];
    let mut x = vec![0.0; dim];
    let mut multi = vec![0usize; dim];
    for sflat in 0..spatial_count {
        decode(sflat, &strides, n, &mut multi);
        for i in 0..dim {
            x[i] = bounds[i].0 + multi[i] as f64 * h[i];
        }
        for hs in halfspaces {
            let e = hs.excess(&x);
            let snap = hs.snap(coord_scale);
            if e > snap {
                exterior[sflat] = true;
                break;
            } else if e >= -snap {
                on_plane[sflat] = true;
            }
        }
    }

    // Second pass: face detection (box faces, on-plane nodes, exterior axis
    // neighbors).
    let mut spatial_class = vec![SpatialClass::Inner; spatial_count];
    for sflat in 0..spatial_count {
        if exterior[sflat] {
            spatial_class[sflat] = SpatialClass::Exterior;
            continue;
        }
        decode(sflat, &strides, n, &mut multi);
        let mut face = on_plane[sflat];
        for i in 0..dim {
            if multi[i] == 0 || multi[i] == n[i] - 1 {
                face = true;
                break;
            }
            if exterior[sflat - strides[i]] || exterior[sflat + strides[i]] {
                face = true;
                break;
            }
        }
        if face {
            spatial_class[sflat] = SpatialClass::Face;
        }
    }

    let mut ne_spatial = Vec::new();
    let mut inner_spatial = Vec::new();
    let mut ne_pos = vec![u32::MAX; spatial_count];
    let mut inner_pos = vec![u32::MAX; spatial_count];
    for sflat in 0..spatial_count {
        match spatial_class[sflat] {
            SpatialClass::Exterior => {}
            SpatialClass::Face => {
                ne_pos[sflat] = ne_spatial.len() as u32;
                ne_spatial.push(sflat);
            }
            SpatialClass::Inner => {
                ne_pos[sflat] = ne_spatial.len() as u32;
                ne_spatial.push(sflat);
                inner_pos[sflat] = inner_spatial.len() as u32;
                inner_spatial.push(sflat);
            }
        }
    }
    if ne_spatial.is_empty() {
        return Err(Error::InvalidDomain(
            "half-space mask excludes every grid node".into(),
        ));
    }
    if inner_spatial.is_empty() {
        return Err(Error::InvalidDomain(
            "mask leaves no interior grid nodes; refine the grid or enlarge the domain".into(),
        ));
    }

    Ok(SpaceTimeGrid {
        id: NEXT_GRID_ID.fetch_add(1, Ordering::Relaxed),
        dim,
        bounds: bounds.to_vec(),
        halfspaces: halfspaces.to_vec(),
        n: n.to_vec(),
        nt,
        t_horizon,
        h,
        dt,
        strides,
        spatial_count,
        spatial_class,
        ne_spatial,
        ne_pos,
        inner_spatial,
        inner_pos,
    })
}

fn decode(sflat: usize, strides: &[usize], n: &[usize], multi: &mut [usize]) {
    let mut rem = sflat;
    for i in 0..strides.len() {
        multi[i] = rem / strides[i];
        rem %= strides[i];
    }
    debug_assert!(multi.iter().zip(n).all(|(&m, &ni)| m < ni));
}

impl SpaceTimeGrid {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn halfspaces(&self) -> &[HalfSpace] {
        &self.halfspaces
    }

    pub fn num_time_levels(&self) -> usize {
        self.nt
    }

    pub fn horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn spacings(&self) -> &[f64] {
        &self.h
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.n
    }

    pub fn spatial_count(&self) -> usize {
        self.spatial_count
    }

    /// Non-exterior spatial nodes per time level.
    pub fn non_exterior_spatial_count(&self) -> usize {
        self.ne_spatial.len()
    }

    /// Interior-class spatial nodes per non-terminal time level.
    pub fn interior_spatial_count(&self) -> usize {
        self.inner_spatial.len()
    }

    /// Total non-exterior space-time nodes (the length of a [`GridFunction`]).
    pub fn non_exterior_count(&self) -> usize {
        self.ne_spatial.len() * self.nt
    }

    /// Flattened spatial indices of non-exterior nodes, ascending.
    pub fn non_exterior_spatial(&self) -> &[usize] {
        &self.ne_spatial
    }

    /// Flattened spatial indices of interior-class nodes, ascending.
    pub fn interior_spatial(&self) -> &[usize] {
        &self.inner_spatial
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    pub fn spatial_coords(&self, sflat: usize) -> Vec<f64> {
        let mut multi = vec![0usize; self.dim];
        decode(sflat, &self.strides, &self.n, &mut multi);
        multi
            .iter()
            .enumerate()
            .map(|(i, &m)| self.bounds[i].0 + m as f64 * self.h[i])
            .collect()
    }

    pub fn multi_index(&self, sflat: usize) -> Vec<usize> {
        let mut multi = vec![0usize; self.dim];
        decode(sflat, &self.strides, &self.n, &mut multi);
        multi
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(&m, &s)| m * s)
            .sum()
    }

    /// Spatial neighbor one step along `axis` in direction `dir` (±1), or
    /// `None` when it would leave the bounding box.
    pub fn neighbor(&self, sflat: usize, axis: usize, dir: i32) -> Option<usize> {
        let mut multi = vec![0usize; self.dim];
        decode(sflat, &self.strides, &self.n, &mut multi);
        let m = multi[axis] as i64 + dir as i64;
        if m < 0 || m >= self.n[axis] as i64 {
            None
        } else if dir > 0 {
            Some(sflat + self.strides[axis])
        } else {
            Some(sflat - self.strides[axis])
        }
    }

    pub fn classify(&self, level: usize, sflat: usize) -> NodeClass {
        match self.spatial_class[sflat] {
            SpatialClass::Exterior => NodeClass::Exterior,
            _ if level == self.nt - 1 => NodeClass::TerminalSlice,
            SpatialClass::Face => NodeClass::LateralBoundary,
            SpatialClass::Inner => NodeClass::Interior,
        }
    }

    pub fn is_spatial_exterior(&self, sflat: usize) -> bool {
        self.spatial_class[sflat] == SpatialClass::Exterior
    }

    /// Index of a non-exterior node within a [`GridFunction`]'s value vector.
    pub fn compact(&self, level: usize, sflat: usize) -> Option<usize> {
        let p = self.ne_pos[sflat];
        if p == u32::MAX || level >= self.nt {
            None
        } else {
            Some(level * self.ne_spatial.len() + p as usize)
        }
    }

    /// Position of an interior spatial node among the per-level unknowns.
    pub fn interior_position(&self, sflat: usize) -> Option<usize> {
        let p = self.inner_pos[sflat];
        if p == u32::MAX {
            None
        } else {
            Some(p as usize)
        }
    }

    /// Position of a non-exterior spatial node within one level's values.
    pub fn non_exterior_position(&self, sflat: usize) -> Option<usize> {
        let p = self.ne_pos[sflat];
        if p == u32::MAX {
            None
        } else {
            Some(p as usize)
        }
    }

    /// All non-exterior nodes, level-major then spatial-ascending: the
    /// canonical ordering of [`GridFunction`] values and CSV output.
    pub fn non_exterior_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nt).flat_map(move |level| {
            self.ne_spatial
                .iter()
                .map(move |&sflat| NodeId { level, sflat })
        })
    }

    /// Totals per class over the whole space-time grid:
    /// (interior, lateral, terminal, exterior).
    pub fn class_counts(&self) -> (usize, usize, usize, usize) {
        let inner = self.inner_spatial.len();
        let ne = self.ne_spatial.len();
        let face = ne - inner;
        let ext = self.spatial_count - ne;
        (
            inner * (self.nt - 1),
            face * (self.nt - 1),
            ne,
            ext * self.nt,
        )
    }

    /// Refine both space and time by an integer factor ≥ 2; parent nodes are
    /// a subset of child nodes.
    pub fn refine(&self, factor: usize) -> Result<SpaceTimeGrid> {
        if factor < 2 {
            return Err(Error::InvalidParameter(format!(
                "refinement factor must be ≥ 2, got {factor}"
            )));
        }
        let n: Vec<usize> = self.n.iter().map(|&ni| factor * (ni - 1) + 1).collect();
        let nt = factor * (self.nt - 1) + 1;
        build_grid(&self.bounds, &self.halfspaces, &n, nt, self.t_horizon)
    }

    /// Distance from x (inside X̄) to the spatial boundary ∂X: the minimum
    /// over bounding-box faces and half-space planes. Exact for convex
    /// box ∩ half-space domains.
    pub fn spatial_boundary_distance(&self, x: &[f64]) -> f64 {
        let mut dist = f64::INFINITY;
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            dist = dist.min(x[i] - lo).min(hi - x[i]);
        }
        for hs in &self.halfspaces {
            dist = dist.min(-hs.excess(x) / hs.norm());
        }
        dist
    }

    /// Distance from (t, x) to the parabolic boundary: the terminal slice is
    /// at time distance T − t, the lateral boundary at the spatial distance.
    /// t = 0 is not a boundary.
    pub fn boundary_distance(&self, t: f64, x: &[f64]) -> f64 {
        (self.t_horizon - t).min(self.spatial_boundary_distance(x))
    }

    /// Interior nodes at distance ≥ `margin` from the parabolic boundary,
    /// level-major ascending. Empty results are valid.
    pub fn interior_subgrid(&self, margin: f64) -> Result<Vec<NodeId>> {
        if !(margin >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "margin must be ≥ 0, got {margin}"
            )));
        }
        let mut set = Vec::new();
        for level in 0..self.nt - 1 {
            let t = self.time(level);
            if self.t_horizon - t < margin {
                continue;
            }
            for &sflat in &self.inner_spatial {
                let x = self.spatial_coords(sflat);
                if self.spatial_boundary_distance(&x) >= margin {
                    set.push(NodeId { level, sflat });
                }
            }
        }
        Ok(set)
    }

    /// Find the node with coordinates (t, x), if (t, x) lies on the grid
    /// lattice within `tol` (absolute, per coordinate) and is non-exterior.
    pub fn locate_node(&self, t: f64, x: &[f64], tol: f64) -> Option<NodeId> {
        if x.len() != self.dim {
            return None;
        }
        let lvl = (t / self.dt).round();
        if lvl < 0.0 || lvl > (self.nt - 1) as f64 || (t - lvl * self.dt).abs() > tol {
            return None;
        }
        let mut multi = vec![0usize; self.dim];
        for i in 0..self.dim {
            let k = ((x[i] - self.bounds[i].0) / self.h[i]).round();
            if k < 0.0 || k > (self.n[i] - 1) as f64 {
                return None;
            }
            if (x[i] - (self.bounds[i].0 + k * self.h[i])).abs() > tol {
                return None;
            }
            multi[i] = k as usize;
        }
        let sflat = self.flat_index(&multi);
        if self.is_spatial_exterior(sflat) {
            return None;
        }
        Some(NodeId {
            level: lvl as usize,
            sflat,
        })
    }
}

/// Scalar field over the non-exterior nodes of one grid, stored level-major
/// in the grid's canonical node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid_id: u64,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        GridFunction {
            grid_id: grid.id,
            values: vec![0.0; grid.non_exterior_count()],
        }
    }

    pub fn constant(grid: &SpaceTimeGrid, c: f64) -> Self {
        GridFunction {
            grid_id: grid.id,
            values: vec![c; grid.non_exterior_count()],
        }
    }

    /// Sample `f(t, x)` at every non-exterior node; rejects non-finite values.
    pub fn from_fn(grid: &SpaceTimeGrid, mut f: impl FnMut(f64, &[f64]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.non_exterior_count());
        for node in grid.non_exterior_nodes() {
            let t = grid.time(node.level);
            let x = grid.spatial_coords(node.sflat);
            let v = f(t, &x);
            if !v.is_finite() {
                return Err(Error::NonFiniteSample(format!(
                    "field value {v} at t={t}, x={x:?}"
                )));
            }
            values.push(v);
        }
        Ok(GridFunction {
            grid_id: grid.id,
            values,
        })
    }

    pub fn from_values(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.non_exterior_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a grid with {} non-exterior nodes",
                values.len(),
                grid.non_exterior_count()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(format!("field value {v}")));
        }
        Ok(GridFunction {
            grid_id: grid.id,
            values,
        })
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }

    pub fn check_grid(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.grid_id != grid.id {
            return Err(Error::ShapeMismatch(format!(
                "grid function belongs to grid {} but grid {} was supplied",
                self.grid_id, grid.id
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at a non-exterior node; panics on exterior nodes or foreign
    /// grids (program logic error, not data error).
    pub fn at(&self, grid: &SpaceTimeGrid, level: usize, sflat: usize) -> f64 {
        debug_assert_eq!(self.grid_id, grid.id);
        self.values[grid.compact(level, sflat).expect("exterior node")]
    }

    pub fn set_at(&mut self, grid: &SpaceTimeGrid, level: usize, sflat: usize, v: f64) {
        debug_assert_eq!(self.grid_id, grid.id);
        let k = grid.compact(level, sflat).expect("exterior node");
        self.values[k] = v;
    }

    pub fn sup(&self) -> f64 {
        crate::linalg::sup_norm(&self.values)
    }

    pub fn sup_diff(&self, other: &GridFunction) -> Result<f64> {
        if self.grid_id != other.grid_id || self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch(
                "sup_diff of grid functions from different grids".into(),
            ));
        }
        Ok(crate::linalg::sup_diff(&self.values, &other.values))
    }
}
