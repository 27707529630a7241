//! TOML configuration schema and the builders that turn a parsed file
//! into solver inputs.
//!
//! Scalar coefficient fields accept a bare number, a builtin shape, or a
//! CSV table sampled at grid nodes. Obstacle pieces can be spelled out
//! sampler by sampler or picked from builtins that carry their own
//! derivatives; non-smooth benchmark envelopes (a tent, a put payoff) are
//! families of smooth builtin pieces.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use parvi::geometry::{build_grid, GridFunction, HalfSpace, SpaceTimeGrid};
use parvi::linalg::SymMat;
use parvi::obstacles::{
    check_boundary_compatibility, truncate_family, ObstacleFamily, ObstaclePiece,
};
use parvi::operators::{BellmanOperator, Control, EllipticityEnvelope, ScalarField};
use parvi::solve::{PenaltySchedule, SolveParams};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub domain: DomainSection,
    pub grid: GridSection,
    pub operator: OperatorSection,
    pub obstacle: ObstacleSection,
    pub boundary: BoundarySection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    /// Bounding box, one [lo, hi] pair per axis.
    pub bounds: Vec<[f64; 2]>,
    #[serde(default)]
    pub halfspaces: Vec<HalfSpaceSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpaceSpec {
    pub normal: Vec<f64>,
    pub offset: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: Vec<usize>,
    pub nt: usize,
    /// Time horizon; the terminal slice sits at t = T.
    #[serde(rename = "T")]
    pub t_horizon: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub lambda_max: f64,
    #[serde(rename = "R", default)]
    pub linear_modulus: f64,
    pub kappa: Option<f64>,
    pub kappa_margin: Option<f64>,
    /// Uniform bound on the source terms; defaults to the largest constant
    /// |f| among the controls.
    #[serde(rename = "growth_G")]
    pub growth: Option<ScalarSpec>,
    pub controls: Vec<ControlSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub label: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: ScalarSpec,
    pub f: ScalarSpec,
}

/// A scalar field: a constant, a builtin shape, or a node table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScalarSpec {
    Const(f64),
    Rich(RichScalar),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RichScalar {
    /// "zero", "linear", "quadratic", "abs_x1", or "put_payoff".
    pub builtin: Option<String>,
    pub strike: Option<f64>,
    pub coeffs: Option<Vec<f64>>,
    pub offset: Option<f64>,
    pub quad: Option<Vec<Vec<f64>>>,
    /// CSV with columns t, x_1..x_d, value; nodes not listed sample NaN.
    pub table: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    #[serde(default)]
    pub pieces: Vec<PieceSpec>,
    /// Family builtin: "abs_x1" or "put_payoff" (with strike).
    pub builtin: Option<String>,
    pub strike: Option<f64>,
    /// Countable-family generator: "line_envelope" truncated to truncate_n.
    pub generator: Option<String>,
    pub truncate_n: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceSpec {
    pub label: String,
    /// "const", "linear", "quadratic", or "strike_minus_exp"; carries its
    /// own derivatives. Alternatively give g, g_t, g_x, g_xx explicitly.
    pub builtin: Option<String>,
    pub strike: Option<f64>,
    pub coeffs: Option<Vec<f64>>,
    pub offset: Option<f64>,
    pub quad: Option<Vec<Vec<f64>>>,
    pub norm_bound: Option<f64>,
    pub g: Option<ScalarSpec>,
    pub g_t: Option<ScalarSpec>,
    pub g_x: Option<Vec<f64>>,
    pub g_xx: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    pub b: ScalarSpec,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    /// "direct", "penalized", or "incremental".
    pub route: Option<String>,
    pub tol: Option<f64>,
    pub contact_tol: Option<f64>,
    pub penalty: Option<PenaltySpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub eps1: f64,
    pub factor: f64,
    pub steps: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub checks: Option<Vec<String>>,
    pub fuzz_instances: Option<usize>,
    pub seed: Option<u64>,
    pub kink_min_margin: Option<f64>,
    pub modulus_rungs: Option<usize>,
    pub stability: Option<StabilitySpec>,
    pub estimate: Option<EstimateSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub factor: Option<usize>,
    pub stages: Option<usize>,
    pub target: Option<f64>,
    pub probes: Option<Vec<ProbeSpec>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSpec {
    pub margin: Option<f64>,
    pub p: Option<f64>,
    pub factor: Option<usize>,
    pub stages: Option<usize>,
    pub ratio_limit: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory used when --out is not given.
    pub directory: Option<PathBuf>,
    /// Subset of {"csv", "json"}; both on by default.
    pub formats: Option<Vec<String>>,
    /// Dump the assembled first-level stencil to stencil.csv.
    #[serde(default)]
    pub stencil_dump: bool,
}

/// Which artifact families a run emits.
#[derive(Debug, Clone, Copy)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

impl OutputSection {
    pub fn formats(&self) -> Result<Formats, CliError> {
        let mut out = Formats {
            csv: false,
            json: false,
        };
        let Some(list) = &self.formats else {
            return Ok(Formats {
                csv: true,
                json: true,
            });
        };
        for name in list {
            match name.as_str() {
                "csv" => out.csv = true,
                "json" => out.json = true,
                other => {
                    return Err(CliError::Config(format!(
                        "output.formats: unknown format '{other}' (expected csv or json)"
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Penalized,
    Incremental,
}

impl Route {
    pub fn parse(s: &str) -> Result<Route, CliError> {
        match s {
            "direct" => Ok(Route::Direct),
            "penalized" => Ok(Route::Penalized),
            "incremental" => Ok(Route::Incremental),
            other => Err(CliError::Config(format!(
                "unknown route '{other}' (expected direct, penalized, or incremental)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Direct => "direct",
            Route::Penalized => "penalized",
            Route::Incremental => "incremental",
        }
    }
}

pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Node-indexed table loaded from CSV, sampling NaN off the listed nodes.
struct NodeTable {
    dt: f64,
    nt: usize,
    lo: Vec<f64>,
    h: Vec<f64>,
    n: Vec<usize>,
    spatial: usize,
    values: Vec<f64>,
}

impl NodeTable {
    fn load(path: &Path, grid: &SpaceTimeGrid) -> Result<NodeTable, CliError> {
        let dim = grid.dim();
        let mut table = NodeTable {
            dt: grid.dt(),
            nt: grid.num_time_levels(),
            lo: grid.bounds().iter().map(|b| b.0).collect(),
            h: grid.spacings().to_vec(),
            n: grid.nodes_per_axis().to_vec(),
            spatial: grid.spatial_count(),
            values: vec![f64::NAN; grid.num_time_levels() * grid.spatial_count()],
        };
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let t_col = col("t").ok_or_else(|| {
            CliError::Config(format!("{}: missing column 't'", path.display()))
        })?;
        let x_cols: Vec<usize> = (1..=dim)
            .map(|i| {
                col(&format!("x_{i}")).ok_or_else(|| {
                    CliError::Config(format!("{}: missing column 'x_{i}'", path.display()))
                })
            })
            .collect::<Result<_, _>>()?;
        let v_col = col("value").ok_or_else(|| {
            CliError::Config(format!("{}: missing column 'value'", path.display()))
        })?;
        for record in reader.records() {
            let record =
                record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let parse = |idx: usize| -> Result<f64, CliError> {
                record
                    .get(idx)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "{}: unparsable number in column {idx}",
                            path.display()
                        ))
                    })
            };
            let t = parse(t_col)?;
            let x: Vec<f64> = x_cols
                .iter()
                .map(|&c| parse(c))
                .collect::<Result<_, _>>()?;
            let v = parse(v_col)?;
            if let Some((level, sflat)) = table.locate(t, &x) {
                let idx = level * table.spatial + sflat;
                table.values[idx] = v;
            }
        }
        Ok(table)
    }

    fn locate(&self, t: f64, x: &[f64]) -> Option<(usize, usize)> {
        let lvl = (t / self.dt).round();
        if lvl < 0.0
            || lvl > (self.nt - 1) as f64
            || (t - lvl * self.dt).abs() > 1e-9 * (1.0 + t.abs())
        {
            return None;
        }
        let mut flat = 0usize;
        let mut stride = 1usize;
        for i in 0..self.n.len() {
            let k = ((x[i] - self.lo[i]) / self.h[i]).round();
            if k < 0.0
                || k > (self.n[i] - 1) as f64
                || (x[i] - (self.lo[i] + k * self.h[i])).abs() > 1e-9 * (1.0 + x[i].abs())
            {
                return None;
            }
            flat += (k as usize) * stride;
            stride *= self.n[i];
        }
        Some((lvl as usize, flat))
    }

    fn sample(&self, t: f64, x: &[f64]) -> f64 {
        match self.locate(t, x) {
            Some((level, sflat)) => self.values[level * self.spatial + sflat],
            None => f64::NAN,
        }
    }
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(u, v)| u * v).sum()
}

fn sym_from_rows(rows: &[Vec<f64>], what: &str) -> Result<SymMat, CliError> {
    let dense: Vec<Vec<f64>> = rows.to_vec();
    SymMat::from_rows(&dense, 1e-12)
        .map_err(|e| CliError::Config(format!("{what}: {e}")))
}

/// Build a scalar sampler from its spec. `base` anchors relative table
/// paths; `grid` resolves table nodes.
pub fn build_scalar(
    spec: &ScalarSpec,
    dim: usize,
    grid: &SpaceTimeGrid,
    base: &Path,
    what: &str,
) -> Result<ScalarField, CliError> {
    match spec {
        ScalarSpec::Const(v) => {
            let v = *v;
            Ok(Arc::new(move |_, _| v))
        }
        ScalarSpec::Rich(rich) => {
            if let Some(path) = &rich.table {
                if rich.builtin.is_some() {
                    return Err(CliError::Config(format!(
                        "{what}: give either a table or a builtin, not both"
                    )));
                }
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                let table = NodeTable::load(&full, grid)?;
                return Ok(Arc::new(move |t, x| table.sample(t, x)));
            }
            let name = rich.builtin.as_deref().ok_or_else(|| {
                CliError::Config(format!("{what}: needs a builtin or a table"))
            })?;
            match name {
                "zero" => Ok(Arc::new(|_, _| 0.0)),
                "linear" => {
                    let coeffs = rich.coeffs.clone().unwrap_or_else(|| vec![0.0; dim]);
                    if coeffs.len() != dim {
                        return Err(CliError::Config(format!(
                            "{what}: linear coeffs have length {}, expected {dim}",
                            coeffs.len()
                        )));
                    }
                    let offset = rich.offset.unwrap_or(0.0);
                    Ok(Arc::new(move |_, x| dot(&coeffs, x) + offset))
                }
                "quadratic" => {
                    let q = rich.quad.clone().ok_or_else(|| {
                        CliError::Config(format!("{what}: quadratic needs 'quad'"))
                    })?;
                    let qm = sym_from_rows(&q, what)?;
                    let coeffs = rich.coeffs.clone().unwrap_or_else(|| vec![0.0; dim]);
                    let offset = rich.offset.unwrap_or(0.0);
                    Ok(Arc::new(move |_, x| {
                        let mut s = offset + dot(&coeffs, x);
                        for i in 0..x.len() {
                            for j in 0..x.len() {
                                s += qm.get(i, j) * x[i] * x[j];
                            }
                        }
                        s
                    }))
                }
                "abs_x1" => Ok(Arc::new(|_, x| x[0].abs())),
                "put_payoff" => {
                    let strike = rich.strike.ok_or_else(|| {
                        CliError::Config(format!("{what}: put_payoff needs 'strike'"))
                    })?;
                    Ok(Arc::new(move |_, x| (strike - x[0].exp()).max(0.0)))
                }
                other => Err(CliError::Config(format!(
                    "{what}: unknown builtin '{other}'"
                ))),
            }
        }
    }
}

fn linear_piece(label: &str, coeffs: Vec<f64>, offset: f64) -> ObstaclePiece {
    let c2 = coeffs.clone();
    let c3 = coeffs.clone();
    let d = coeffs.len();
    ObstaclePiece::new(
        label,
        Arc::new(move |_, x: &[f64]| dot(&c2, x) + offset),
        Arc::new(|_, _: &[f64]| 0.0),
        Arc::new(move |_, _: &[f64]| c3.clone()),
        Arc::new(move |_, _: &[f64]| SymMat::zeros(d)),
    )
}

fn quadratic_piece(label: &str, q: SymMat, coeffs: Vec<f64>, offset: f64) -> ObstaclePiece {
    let d = coeffs.len();
    let (qv, qg, qh) = (q.clone(), q.clone(), q);
    let (c1, c2) = (coeffs.clone(), coeffs);
    ObstaclePiece::new(
        label,
        Arc::new(move |_, x: &[f64]| {
            let mut s = offset + dot(&c1, x);
            for i in 0..x.len() {
                for j in 0..x.len() {
                    s += qv.get(i, j) * x[i] * x[j];
                }
            }
            s
        }),
        Arc::new(|_, _: &[f64]| 0.0),
        Arc::new(move |_, x: &[f64]| {
            (0..d)
                .map(|i| c2[i] + 2.0 * (0..d).map(|j| qg.get(i, j) * x[j]).sum::<f64>())
                .collect()
        }),
        Arc::new(move |_, _: &[f64]| qh.scale(2.0)),
    )
}

fn strike_minus_exp_piece(label: &str, strike: f64, dim: usize) -> ObstaclePiece {
    ObstaclePiece::new(
        label,
        Arc::new(move |_, x: &[f64]| strike - x[0].exp()),
        Arc::new(|_, _: &[f64]| 0.0),
        Arc::new(move |_, x: &[f64]| {
            let mut g = vec![0.0; dim];
            g[0] = -x[0].exp();
            g
        }),
        Arc::new(move |_, x: &[f64]| {
            let mut m = SymMat::zeros(dim);
            m.set(0, 0, -x[0].exp());
            m
        }),
    )
}

fn build_piece(
    spec: &PieceSpec,
    dim: usize,
    grid: &SpaceTimeGrid,
    base: &Path,
) -> Result<ObstaclePiece, CliError> {
    let what = format!("obstacle piece '{}'", spec.label);
    let piece = if let Some(builtin) = &spec.builtin {
        match builtin.as_str() {
            "const" => linear_piece(&spec.label, vec![0.0; dim], spec.offset.unwrap_or(0.0)),
            "linear" => {
                let coeffs = spec.coeffs.clone().unwrap_or_else(|| vec![0.0; dim]);
                if coeffs.len() != dim {
                    return Err(CliError::Config(format!(
                        "{what}: coeffs have length {}, expected {dim}",
                        coeffs.len()
                    )));
                }
                linear_piece(&spec.label, coeffs, spec.offset.unwrap_or(0.0))
            }
            "quadratic" => {
                let rows = spec.quad.clone().ok_or_else(|| {
                    CliError::Config(format!("{what}: quadratic needs 'quad'"))
                })?;
                let q = sym_from_rows(&rows, &what)?;
                let coeffs = spec.coeffs.clone().unwrap_or_else(|| vec![0.0; dim]);
                quadratic_piece(&spec.label, q, coeffs, spec.offset.unwrap_or(0.0))
            }
            "strike_minus_exp" => {
                let strike = spec.strike.ok_or_else(|| {
                    CliError::Config(format!("{what}: strike_minus_exp needs 'strike'"))
                })?;
                strike_minus_exp_piece(&spec.label, strike, dim)
            }
            other => {
                return Err(CliError::Config(format!(
                    "{what}: unknown piece builtin '{other}'"
                )))
            }
        }
    } else {
        let g = spec.g.as_ref().ok_or_else(|| {
            CliError::Config(format!("{what}: needs a builtin or explicit samplers"))
        })?;
        let g_t = spec.g_t.as_ref().ok_or_else(|| {
            CliError::Config(format!("{what}: missing g_t"))
        })?;
        let g_x = spec.g_x.clone().ok_or_else(|| {
            CliError::Config(format!("{what}: missing g_x (constant vector)"))
        })?;
        let g_xx_rows = spec.g_xx.clone().ok_or_else(|| {
            CliError::Config(format!("{what}: missing g_xx (constant matrix)"))
        })?;
        if g_x.len() != dim {
            return Err(CliError::Config(format!(
                "{what}: g_x has length {}, expected {dim}",
                g_x.len()
            )));
        }
        let g_fn = build_scalar(g, dim, grid, base, &format!("{what}.g"))?;
        let gt_fn = build_scalar(g_t, dim, grid, base, &format!("{what}.g_t"))?;
        let hess = sym_from_rows(&g_xx_rows, &format!("{what}.g_xx"))?;
        ObstaclePiece::new(
            &spec.label,
            g_fn,
            gt_fn,
            Arc::new(move |_, _: &[f64]| g_x.clone()),
            Arc::new(move |_, _: &[f64]| hess.clone()),
        )
    };
    Ok(match spec.norm_bound {
        Some(b) => piece.with_norm_bound(b),
        None => piece,
    })
}

pub fn build_family(
    section: &ObstacleSection,
    dim: usize,
    grid: &SpaceTimeGrid,
    base: &Path,
) -> Result<ObstacleFamily, CliError> {
    let sources = [
        !section.pieces.is_empty(),
        section.builtin.is_some(),
        section.generator.is_some(),
    ]
    .iter()
    .filter(|&&x| x)
    .count();
    if sources != 1 {
        return Err(CliError::Config(
            "obstacle section needs exactly one of: pieces, builtin, generator".into(),
        ));
    }
    if let Some(builtin) = &section.builtin {
        return match builtin.as_str() {
            "abs_x1" => {
                let mut up = vec![0.0; dim];
                up[0] = 1.0;
                let mut down = vec![0.0; dim];
                down[0] = -1.0;
                ObstacleFamily::new(vec![
                    linear_piece("up", up, 0.0),
                    linear_piece("down", down, 0.0),
                ])
                .map_err(CliError::from)
            }
            "put_payoff" => {
                let strike = section.strike.ok_or_else(|| {
                    CliError::Config("obstacle builtin put_payoff needs 'strike'".into())
                })?;
                ObstacleFamily::new(vec![
                    strike_minus_exp_piece("exercise", strike, dim),
                    linear_piece("worthless", vec![0.0; dim], 0.0),
                ])
                .map_err(CliError::from)
            }
            other => Err(CliError::Config(format!(
                "unknown obstacle family builtin '{other}'"
            ))),
        };
    }
    if let Some(generator) = &section.generator {
        let n = section.truncate_n.ok_or_else(|| {
            CliError::Config("obstacle generator needs 'truncate_n'".into())
        })?;
        return match generator.as_str() {
            "line_envelope" => {
                let family = truncate_family(
                    |k| {
                        let s = 0.1 * (k + 1) as f64;
                        let mut coeffs = vec![0.0; dim];
                        coeffs[0] = s;
                        Some(linear_piece(&format!("s{}", k + 1), coeffs, -s * s / 4.0))
                    },
                    n,
                    grid,
                )?;
                Ok(family)
            }
            other => Err(CliError::Config(format!(
                "unknown obstacle generator '{other}'"
            ))),
        };
    }
    let pieces = section
        .pieces
        .iter()
        .map(|spec| build_piece(spec, dim, grid, base))
        .collect::<Result<Vec<_>, _>>()?;
    ObstacleFamily::new(pieces).map_err(CliError::from)
}

pub fn build_operator(
    section: &OperatorSection,
    dim: usize,
    grid: &SpaceTimeGrid,
    base: &Path,
) -> Result<BellmanOperator, CliError> {
    let mut envelope =
        EllipticityEnvelope::new(section.lambda, section.lambda_max, section.linear_modulus)?;
    if let Some(kappa) = section.kappa {
        envelope = envelope.with_kappa(kappa, section.kappa_margin.unwrap_or(0.1))?;
    }
    let mut controls = Vec::with_capacity(section.controls.len());
    let mut max_const_f = 0.0f64;
    for spec in &section.controls {
        let what = format!("control '{}'", spec.label);
        let a = sym_from_rows(&spec.a, &format!("{what}.A"))?;
        if a.dim() != dim {
            return Err(CliError::Config(format!(
                "{what}: A is {}x{}, expected {dim}x{dim}",
                a.dim(),
                a.dim()
            )));
        }
        if spec.b.len() != dim {
            return Err(CliError::Config(format!(
                "{what}: drift has length {}, expected {dim}",
                spec.b.len()
            )));
        }
        if let ScalarSpec::Const(f) = spec.f {
            max_const_f = max_const_f.max(f.abs());
        }
        let c = build_scalar(&spec.c, dim, grid, base, &format!("{what}.c"))?;
        let f = build_scalar(&spec.f, dim, grid, base, &format!("{what}.f"))?;
        let drift = spec.b.clone();
        controls.push(Control::new(
            &spec.label,
            Arc::new(move |_, _| a.clone()),
            Arc::new(move |_, _| drift.clone()),
            c,
            f,
        ));
    }
    let growth: ScalarField = match &section.growth {
        Some(spec) => build_scalar(spec, dim, grid, base, "operator.growth_G")?,
        None => Arc::new(move |_, _| max_const_f),
    };
    BellmanOperator::new(dim, controls, envelope, growth).map_err(CliError::from)
}

/// Everything a command needs, built and cross-validated from one config.
pub struct Instance {
    pub grid: SpaceTimeGrid,
    pub op: BellmanOperator,
    pub family: ObstacleFamily,
    pub b_sampler: ScalarField,
    pub b: GridFunction,
    pub params: SolveParams,
    pub schedule: PenaltySchedule,
    pub route: Route,
}

pub struct Overrides {
    pub tol: Option<f64>,
    pub route: Option<Route>,
}

pub fn build_instance(
    cfg: &Config,
    config_dir: &Path,
    over: &Overrides,
) -> Result<Instance, CliError> {
    let bounds: Vec<(f64, f64)> = cfg.domain.bounds.iter().map(|b| (b[0], b[1])).collect();
    let halfspaces: Vec<HalfSpace> = cfg
        .domain
        .halfspaces
        .iter()
        .map(|h| HalfSpace {
            normal: h.normal.clone(),
            offset: h.offset,
        })
        .collect();
    let grid = build_grid(
        &bounds,
        &halfspaces,
        &cfg.grid.n,
        cfg.grid.nt,
        cfg.grid.t_horizon,
    )?;
    let dim = grid.dim();
    let op = build_operator(&cfg.operator, dim, &grid, config_dir)?;
    let family = build_family(&cfg.obstacle, dim, &grid, config_dir)?;
    let b_sampler = build_scalar(&cfg.boundary.b, dim, &grid, config_dir, "boundary.b")?;
    let b = GridFunction::from_fn(&grid, |t, x| b_sampler(t, x))?;

    let mut params = SolveParams::default();
    if let Some(tol) = over.tol.or(cfg.solve.tol) {
        if !(tol > 0.0) {
            return Err(CliError::Config(format!(
                "solve.tol must be positive, got {tol}"
            )));
        }
        params.tol = tol;
    }
    if let Some(ct) = cfg.solve.contact_tol {
        params.contact_tol = ct;
    }

    check_boundary_compatibility(&family, &grid, &b, params.boundary_tol)?;

    let (g, _) = parvi::obstacles::obstacle_field(&family, &grid)?;
    let schedule = match &cfg.solve.penalty {
        Some(p) => PenaltySchedule::geometric(p.eps1, p.factor, p.steps)?,
        None => PenaltySchedule::deep_for(g.sup(), params.tol)?,
    };
    let route = match over.route {
        Some(r) => r,
        None => Route::parse(cfg.solve.route.as_deref().unwrap_or("direct"))?,
    };
    Ok(Instance {
        grid,
        op,
        family,
        b_sampler,
        b,
        params,
        schedule,
        route,
    })
}
