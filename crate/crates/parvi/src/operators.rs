//! The nonlinear operator F in Bellman form and the Pucci extremal
//! operators that bound it.
//!
//! F(t, x, r, q, M) = max over a finite control set of
//! tr(A^α M) + b^α·q + c^α r + f^α, with all coefficients sampled fields
//! over (t, x). The envelope pins the ellipticity window [λ, Λ], the linear
//! modulus R bounding drift and zeroth-order terms, and optionally a
//! monotonicity constant κ with margin δ such that c^α ≤ κ − δ everywhere.
//! Coefficients may be discontinuous in (t, x); the operator is convex and
//! monotone in M by construction.

use std::fmt;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::SpaceTimeGrid;
use crate::linalg::SymMat;

pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &[f64]) -> SymMat + Send + Sync>;

/// Ellipticity window and growth/monotonicity constants for the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityEnvelope {
    pub lambda: f64,
    pub lambda_max: f64,
    /// Linear modulus: |b^α| ≤ R and |c^α| ≤ R, so F moves by at most
    /// R(|r − r̃| + |q − q̃|) under zeroth- and first-order changes.
    pub linear_modulus: f64,
    /// Monotonicity constant: r ↦ F − κr must strictly decrease.
    pub kappa: Option<f64>,
    /// Margin for the κ check: c^α ≤ κ − δ with δ > 0.
    pub kappa_margin: f64,
}

impl EllipticityEnvelope {
    pub fn new(lambda: f64, lambda_max: f64, linear_modulus: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidOperator(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        if !(lambda_max >= lambda && lambda_max.is_finite()) {
            return Err(Error::InvalidOperator(format!(
                "Lambda must satisfy lambda ≤ Lambda < ∞, got {lambda_max}"
            )));
        }
        if !(linear_modulus >= 0.0 && linear_modulus.is_finite()) {
            return Err(Error::InvalidOperator(format!(
                "linear modulus R must be ≥ 0, got {linear_modulus}"
            )));
        }
        Ok(EllipticityEnvelope {
            lambda,
            lambda_max,
            linear_modulus,
            kappa: None,
            kappa_margin: 0.1,
        })
    }

    pub fn with_kappa(mut self, kappa: f64, margin: f64) -> Result<Self> {
        if !kappa.is_finite() || !(margin > 0.0) {
            return Err(Error::InvalidOperator(format!(
                "kappa must be finite with margin δ > 0, got κ={kappa}, δ={margin}"
            )));
        }
        self.kappa = Some(kappa);
        self.kappa_margin = margin;
        Ok(self)
    }
}

/// Pucci extremal values (P⁻, P⁺) of a symmetric matrix over the envelope:
/// P⁺ = Λ·(sum of positive eigenvalues) + λ·(sum of negative ones), P⁻ with
/// the roles of λ and Λ swapped. These are the extreme envelopes of tr(AM)
/// over all symmetric A with λI ≤ A ≤ ΛI.
pub fn pucci(m: &SymMat, env: &EllipticityEnvelope) -> (f64, f64) {
    let mut pminus = 0.0;
    let mut pplus = 0.0;
    for e in m.eigenvalues() {
        if e > 0.0 {
            pplus += env.lambda_max * e;
            pminus += env.lambda * e;
        } else {
            pplus += env.lambda * e;
            pminus += env.lambda_max * e;
        }
    }
    (pminus, pplus)
}

/// Pucci values from a raw row-major matrix, enforcing symmetry to 1e-12.
pub fn pucci_rows(rows: &[Vec<f64>], env: &EllipticityEnvelope) -> Result<(f64, f64)> {
    let m = SymMat::from_rows(rows, 1e-12)?;
    Ok(pucci(&m, env))
}

/// One control of the Bellman operator: a linear elliptic operator
/// tr(A M) + b·q + c r + f with coefficient fields over (t, x).
#[derive(Clone)]
pub struct Control {
    label: String,
    a: MatrixField,
    b: VectorField,
    c: ScalarField,
    f: ScalarField,
}

/// Coefficients of one control frozen at a point (t, x).
#[derive(Debug, Clone)]
pub struct ControlCoeffs {
    pub a: SymMat,
    pub b: Vec<f64>,
    pub c: f64,
    pub f: f64,
}

impl Control {
    pub fn new(
        label: impl Into<String>,
        a: MatrixField,
        b: VectorField,
        c: ScalarField,
        f: ScalarField,
    ) -> Self {
        Control {
            label: label.into(),
            a,
            b,
            c,
            f,
        }
    }

    /// Control with coefficients constant in (t, x).
    pub fn constant(label: impl Into<String>, a: SymMat, b: Vec<f64>, c: f64, f: f64) -> Self {
        Control {
            label: label.into(),
            a: Arc::new(move |_, _| a.clone()),
            b: Arc::new(move |_, _| b.clone()),
            c: Arc::new(move |_, _| c),
            f: Arc::new(move |_, _| f),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Sample all coefficients at (t, x), rejecting non-finite values (which
    /// is also how missing table rows surface: lookups return NaN).
    pub fn coeffs_at(&self, dim: usize, t: f64, x: &[f64]) -> Result<ControlCoeffs> {
        let a = (self.a)(t, x);
        let b = (self.b)(t, x);
        let c = (self.c)(t, x);
        let f = (self.f)(t, x);
        if a.dim() != dim || b.len() != dim {
            return Err(Error::InvalidOperator(format!(
                "control {}: coefficient dimensions do not match the {dim}-d domain",
                self.label
            )));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) || !c.is_finite() || !f.is_finite()
        {
            return Err(Error::InvalidOperator(format!(
                "control {}: non-finite coefficient sample at t={t}, x={x:?} \
                 (missing table node or bad field)",
                self.label
            )));
        }
        Ok(ControlCoeffs { a, b, c, f })
    }
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Control").field("label", &self.label).finish()
    }
}

/// F as a pointwise maximum of linear elliptic operators over finitely many
/// controls.
#[derive(Clone)]
pub struct BellmanOperator {
    dim: usize,
    controls: Vec<Control>,
    envelope: EllipticityEnvelope,
    growth: ScalarField,
}

impl fmt::Debug for BellmanOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BellmanOperator")
            .field("dim", &self.dim)
            .field(
                "controls",
                &self.controls.iter().map(|c| c.label()).collect::<Vec<_>>(),
            )
            .field("envelope", &self.envelope)
            .finish()
    }
}

impl BellmanOperator {
    pub fn new(
        dim: usize,
        controls: Vec<Control>,
        envelope: EllipticityEnvelope,
        growth: ScalarField,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidOperator(
                "operator needs at least one control".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidOperator("operator dimension is zero".into()));
        }
        let mut labels: Vec<&str> = controls.iter().map(|c| c.label()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidOperator(
                "control labels must be unique".into(),
            ));
        }
        Ok(BellmanOperator {
            dim,
            controls,
            envelope,
            growth,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn envelope(&self) -> &EllipticityEnvelope {
        &self.envelope
    }

    /// Growth envelope G(t, x) bounding |f^α| (and hence |F(t,x,0,0,0)|).
    pub fn growth_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        let g = (self.growth)(t, x);
        if !g.is_finite() || g < 0.0 {
            return Err(Error::InvalidOperator(format!(
                "growth envelope G({t}, {x:?}) = {g} must be finite and ≥ 0"
            )));
        }
        Ok(g)
    }

    /// Value and argmax control index at one point; ties go to the first
    /// control in declaration order.
    pub fn eval_indexed(
        &self,
        t: f64,
        x: &[f64],
        r: f64,
        q: &[f64],
        m: &SymMat,
    ) -> Result<(f64, usize)> {
        if !r.is_finite() || q.iter().any(|v| !v.is_finite()) || !m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "operator arguments must be finite at t={t}, x={x:?}"
            )));
        }
        if q.len() != self.dim || m.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "gradient/Hessian of dimension {}/{} for a {}-d operator",
                q.len(),
                m.dim(),
                self.dim
            )));
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (idx, ctrl) in self.controls.iter().enumerate() {
            let co = ctrl.coeffs_at(self.dim, t, x)?;
            let v = co.a.dot(m) + dot(&co.b, q) + co.c * r + co.f;
            if v > best {
                best = v;
                best_idx = idx;
            }
        }
        Ok((best, best_idx))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Evaluate F(t, x, r, q, M); returns the value and the label of the first
/// maximizing control.
pub fn eval_operator<'a>(
    op: &'a BellmanOperator,
    t: f64,
    x: &[f64],
    r: f64,
    q: &[f64],
    m: &SymMat,
) -> Result<(f64, &'a str)> {
    let (v, idx) = op.eval_indexed(t, x, r, q, m)?;
    Ok((v, op.controls[idx].label()))
}

/// A structure-condition witness: the tuple whose two-sided Pucci bound
/// failed, with the violation size.
#[derive(Debug, Clone)]
pub struct ScWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub r_tilde: f64,
    pub q: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub gap: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct GrowthWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub control: String,
    pub source_value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct MonotonicityWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub control: String,
    pub c_value: f64,
    pub bound: f64,
}

/// Result of sampling-based operator validation; deterministic for a fixed
/// seed.
#[derive(Debug, Clone)]
pub struct OperatorValidationReport {
    pub samples: usize,
    pub sc_violations: usize,
    pub growth_violations: usize,
    pub monotonicity_violations: usize,
    pub worst_sc: Option<ScWitness>,
    pub worst_growth: Option<GrowthWitness>,
    pub worst_monotonicity: Option<MonotonicityWitness>,
    /// Empirical Lipschitz constants of F in r and q, fitted from the probes.
    pub fitted_lip_r: f64,
    pub fitted_lip_q: f64,
}

impl OperatorValidationReport {
    pub fn pass(&self) -> bool {
        self.sc_violations == 0 && self.growth_violations == 0 && self.monotonicity_violations == 0
    }
}

struct ScProbe<'p> {
    r: f64,
    r2: f64,
    q: &'p [f64],
    q2: &'p [f64],
    m: &'p SymMat,
    m2: &'p SymMat,
    what: &'static str,
}

/// Check the two-sided structure condition, the growth bound |f^α| ≤ G, the
/// coefficient envelopes (eigenvalues of A in [λ, Λ], |b| ≤ R, |c| ≤ R), and
/// (when κ is set) strict decrease of r ↦ F − κr, at `samples` random grid
/// nodes with random argument tuples. Violations are counted per sample with
/// worst-case witnesses; the report passes iff every count is zero.
pub fn validate_operator(
    op: &BellmanOperator,
    grid: &SpaceTimeGrid,
    samples: usize,
    seed: u64,
) -> Result<OperatorValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be ≥ 1".into()));
    }
    if grid.dim() != op.dim() {
        return Err(Error::ShapeMismatch(format!(
            "operator dimension {} vs grid dimension {}",
            op.dim(),
            grid.dim()
        )));
    }
    let env = op.envelope();
    let d = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = grid.non_exterior_spatial();

    let mut report = OperatorValidationReport {
        samples,
        sc_violations: 0,
        growth_violations: 0,
        monotonicity_violations: 0,
        worst_sc: None,
        worst_growth: None,
        worst_monotonicity: None,
        fitted_lip_r: 0.0,
        fitted_lip_q: 0.0,
    };

    for _ in 0..samples {
        let level = rng.random_range(0..grid.num_time_levels());
        let sflat = ne[rng.random_range(0..ne.len())];
        let t = grid.time(level);
        let x = grid.spatial_coords(sflat);

        let r = rng.random_range(-5.0..5.0);
        let r2 = rng.random_range(-5.0..5.0);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q2: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = random_sym(&mut rng, d, 2.0);
        let m2 = random_sym(&mut rng, d, 2.0);

        let mut sc_bad = false;
        let mut mono_bad = false;

        // Coefficient-level envelope checks at this node.
        for ctrl in op.controls() {
            let co = ctrl.coeffs_at(d, t, &x)?;
            let eigs = co.a.eigenvalues();
            let e_lo = eigs[0];
            let e_hi = eigs[eigs.len() - 1];
            let tol = 1e-10 * env.lambda_max.max(1.0);
            if e_lo < env.lambda - tol || e_hi > env.lambda_max + tol {
                sc_bad = true;
                note_sc(&mut report, ScWitness {
                    t,
                    x: x.clone(),
                    r,
                    r_tilde: r,
                    q: q.clone(),
                    q_tilde: q.clone(),
                    gap: (env.lambda - e_lo).max(e_hi - env.lambda_max),
                    detail: format!(
                        "control {}: diffusion eigenvalues [{e_lo:.6}, {e_hi:.6}] leave \
                         [{}, {}]",
                        ctrl.label(),
                        env.lambda,
                        env.lambda_max
                    ),
                });
            }
            let btol = 1e-10 * env.linear_modulus.max(1.0);
            if norm2(&co.b) > env.linear_modulus + btol || co.c.abs() > env.linear_modulus + btol
            {
                sc_bad = true;
                let mut q_tilde = q.clone();
                let bn = norm2(&co.b);
                if bn > 0.0 {
                    for i in 0..d {
                        q_tilde[i] += co.b[i] / bn;
                    }
                }
                note_sc(&mut report, ScWitness {
                    t,
                    x: x.clone(),
                    r,
                    r_tilde: r + 1.0,
                    q: q.clone(),
                    q_tilde,
                    gap: (bn - env.linear_modulus).max(co.c.abs() - env.linear_modulus),
                    detail: format!(
                        "control {}: |b| = {bn:.6}, |c| = {:.6} exceed R = {}",
                        ctrl.label(),
                        co.c.abs(),
                        env.linear_modulus
                    ),
                });
            }
            let g = op.growth_at(t, &x)?;
            if co.f.abs() > g + 1e-10 * g.max(1.0) {
                report.growth_violations += 1;
                let better = report
                    .worst_growth
                    .as_ref()
                    .map(|w| co.f.abs() - g > w.source_value - w.bound)
                    .unwrap_or(true);
                if better {
                    report.worst_growth = Some(GrowthWitness {
                        t,
                        x: x.clone(),
                        control: ctrl.label().to_string(),
                        source_value: co.f.abs(),
                        bound: g,
                    });
                }
            }
            if let Some(kappa) = env.kappa {
                if co.c > kappa - env.kappa_margin + 1e-12 {
                    mono_bad = true;
                    let better = report
                        .worst_monotonicity
                        .as_ref()
                        .map(|w| co.c - (kappa - env.kappa_margin) > w.c_value - w.bound)
                        .unwrap_or(true);
                    if better {
                        report.worst_monotonicity = Some(MonotonicityWitness {
                            t,
                            x: x.clone(),
                            control: ctrl.label().to_string(),
                            c_value: co.c,
                            bound: kappa - env.kappa_margin,
                        });
                    }
                }
            }
        }

        // Structure-condition probes: the full random tuple plus one-factor
        // probes, including drift-aligned gradient probes per control.
        let mut probes = vec![
            ScProbe { r, r2, q: &q, q2: &q2, m: &m, m2: &m2, what: "full" },
            ScProbe { r, r2, q: &q, q2: &q, m: &m, m2: &m, what: "r-only" },
            ScProbe { r, r2: r, q: &q, q2: &q2, m: &m, m2: &m, what: "q-only" },
            ScProbe { r, r2: r, q: &q, q2: &q, m: &m, m2: &m2, what: "M-only" },
        ];
        let mut aligned: Vec<(Vec<f64>, &'static str)> = Vec::new();
        for ctrl in op.controls() {
            let co = ctrl.coeffs_at(d, t, &x)?;
            let bn = norm2(&co.b);
            if bn > 0.0 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                for i in 0..d {
                    qp[i] += co.b[i] / bn;
                    qm[i] -= co.b[i] / bn;
                }
                aligned.push((qp, "q-aligned"));
                aligned.push((qm, "q-aligned"));
            }
        }
        for (qa, what) in &aligned {
            probes.push(ScProbe { r, r2: r, q: &q, q2: qa, m: &m, m2: &m, what });
        }

        for p in &probes {
            let (f1, _) = op.eval_indexed(t, &x, p.r, p.q, p.m)?;
            let (f2, _) = op.eval_indexed(t, &x, p.r2, p.q2, p.m2)?;
            let diff = f1 - f2;
            let dm = p.m.add_mat(&p.m2.scale(-1.0));
            let (pminus, pplus) = pucci(&dm, env);
            let dq: Vec<f64> = p.q.iter().zip(p.q2).map(|(a, b)| a - b).collect();
            let omega = env.linear_modulus * ((p.r - p.r2).abs() + norm2(&dq));
            let scale = 1.0 + f1.abs() + f2.abs() + pplus.abs() + pminus.abs() + omega;
            let slack = 1e-9 * scale;
            let gap = (diff - (pplus + omega)).max((pminus - omega) - diff);
            if gap > slack {
                sc_bad = true;
                note_sc(&mut report, ScWitness {
                    t,
                    x: x.clone(),
                    r: p.r,
                    r_tilde: p.r2,
                    q: p.q.to_vec(),
                    q_tilde: p.q2.to_vec(),
                    gap,
                    detail: format!(
                        "{} probe: F difference {diff:.6} outside \
                         [{:.6}, {:.6}]",
                        p.what,
                        pminus - omega,
                        pplus + omega
                    ),
                });
            }
            if p.what == "r-only" && (p.r - p.r2).abs() > 1e-9 {
                report.fitted_lip_r =
                    report.fitted_lip_r.max(diff.abs() / (p.r - p.r2).abs());
            }
            if (p.what == "q-only" || p.what == "q-aligned") && norm2(&dq) > 1e-9 {
                report.fitted_lip_q = report.fitted_lip_q.max(diff.abs() / norm2(&dq));
            }
        }

        // Monotonicity along the sampled r-line: F − κr must strictly
        // decrease, with slope at most −δ.
        if let Some(kappa) = env.kappa {
            let (lo, hi) = if r <= r2 { (r, r2) } else { (r2, r) };
            if hi - lo > 1e-9 {
                let (f_lo, _) = op.eval_indexed(t, &x, lo, &q, &m)?;
                let (f_hi, _) = op.eval_indexed(t, &x, hi, &q, &m)?;
                let drop = (f_hi - kappa * hi) - (f_lo - kappa * lo);
                let scale = 1.0 + f_lo.abs() + f_hi.abs();
                if drop > -env.kappa_margin * (hi - lo) + 1e-9 * scale {
                    mono_bad = true;
                    if report.worst_monotonicity.is_none() {
                        report.worst_monotonicity = Some(MonotonicityWitness {
                            t,
                            x: x.clone(),
                            control: "(sampled line)".into(),
                            c_value: drop / (hi - lo) + kappa,
                            bound: kappa - env.kappa_margin,
                        });
                    }
                }
            }
        }

        if sc_bad {
            report.sc_violations += 1;
        }
        if mono_bad {
            report.monotonicity_violations += 1;
        }
    }

    Ok(report)
}

fn note_sc(report: &mut OperatorValidationReport, w: ScWitness) {
    let better = report
        .worst_sc
        .as_ref()
        .map(|old| w.gap > old.gap)
        .unwrap_or(true);
    if better {
        report.worst_sc = Some(w);
    }
}

fn random_sym(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> SymMat {
    let mut m = SymMat::zeros(d);
    for i in 0..d {
        for j in i..d {
            m.set(i, j, rng.random_range(-scale..scale));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use proptest::prelude::*;

    fn env(l: f64, ll: f64) -> EllipticityEnvelope {
        EllipticityEnvelope::new(l, ll, 0.0).unwrap()
    }

    /// Brute-force Pucci oracle: maximize tr(AM) over the corner matrices
    /// A = Q diag(a) Qᵀ with a_i ∈ {λ, Λ} and Q the eigenvectors of M.
    fn pucci_brute(m: &SymMat, e: &EllipticityEnvelope) -> (f64, f64) {
        let evals = m.eigenvalues();
        let d = m.dim();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for corner in 0..(1usize << d) {
            let mut tr = 0.0;
            for (i, ev) in evals.iter().enumerate() {
                let a = if corner & (1 << i) != 0 {
                    e.lambda_max
                } else {
                    e.lambda
                };
                tr += a * ev;
            }
            lo = lo.min(tr);
            hi = hi.max(tr);
        }
        (lo, hi)
    }

    #[test]
    fn pucci_on_indefinite_diagonal() {
        let e = env(1.0, 2.0);
        let m = SymMat::from_diag(&[1.0, -1.0]);
        let (pm, pp) = pucci(&m, &e);
        assert_eq!(pp, 1.0);
        assert_eq!(pm, -1.0);
        let z = SymMat::zeros(3);
        assert_eq!(pucci(&z, &e), (0.0, 0.0));
    }

    #[test]
    fn pucci_matches_corner_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=4 {
            let e = env(0.7, 2.3);
            for _ in 0..50 {
                let m = random_sym(&mut rng, d, 3.0);
                let (pm, pp) = pucci(&m, &e);
                let (bm, bp) = pucci_brute(&m, &e);
                assert!((pm - bm).abs() < 1e-12 && (pp - bp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pucci_rows_rejects_asymmetry() {
        let e = env(1.0, 1.0);
        let rows = vec![vec![1.0, 0.5], vec![0.4, 1.0]];
        assert!(pucci_rows(&rows, &e).is_err());
        let ok = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        assert!(pucci_rows(&ok, &e).is_ok());
    }

    #[test]
    fn envelope_validation() {
        assert!(EllipticityEnvelope::new(0.0, 1.0, 0.0).is_err());
        assert!(EllipticityEnvelope::new(2.0, 1.0, 0.0).is_err());
        assert!(EllipticityEnvelope::new(1.0, 2.0, -1.0).is_err());
        assert!(env(1.0, 1.0).with_kappa(0.0, 0.0).is_err());
    }

    fn heat_operator(dim: usize) -> BellmanOperator {
        let ctrl = Control::constant(
            "heat",
            SymMat::identity(dim),
            vec![0.0; dim],
            0.0,
            0.0,
        );
        BellmanOperator::new(dim, vec![ctrl], env(1.0, 1.0), Arc::new(|_, _| 0.0)).unwrap()
    }

    #[test]
    fn eval_heat_trace() {
        let op = heat_operator(1);
        let m = SymMat::from_diag(&[2.0]);
        let (v, label) = eval_operator(&op, 0.0, &[0.0], 0.0, &[0.0], &m).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(label, "heat");
    }

    #[test]
    fn eval_takes_first_maximizer() {
        let mk = |label: &str, f: f64| {
            Control::constant(label, SymMat::identity(1), vec![0.0], 0.0, f)
        };
        let op = BellmanOperator::new(
            1,
            vec![mk("c1", 1.0), mk("c2", 3.0), mk("c3", 3.0)],
            env(1.0, 1.0),
            Arc::new(|_, _| 3.0),
        )
        .unwrap();
        let m = SymMat::zeros(1);
        let (v, label) = eval_operator(&op, 0.0, &[0.0], 0.0, &[0.0], &m).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(label, "c2");
    }

    #[test]
    fn eval_matches_per_control_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let a1 = rng.random_range(0.5..2.0);
            let a2 = rng.random_range(0.5..2.0);
            let b1 = rng.random_range(-1.0..1.0);
            let b2 = rng.random_range(-1.0..1.0);
            let c1 = rng.random_range(-1.0..0.0);
            let c2 = rng.random_range(-1.0..0.0);
            let f1 = rng.random_range(-1.0..1.0);
            let f2 = rng.random_range(-1.0..1.0);
            let op = BellmanOperator::new(
                1,
                vec![
                    Control::constant("u1", SymMat::from_diag(&[a1]), vec![b1], c1, f1),
                    Control::constant("u2", SymMat::from_diag(&[a2]), vec![b2], c2, f2),
                ],
                env(0.5, 2.0),
                Arc::new(|_, _| 1.0),
            )
            .unwrap();
            let r = rng.random_range(-2.0..2.0);
            let q = rng.random_range(-2.0..2.0);
            let mm = rng.random_range(-2.0..2.0);
            let m = SymMat::from_diag(&[mm]);
            let (v, _) = eval_operator(&op, 0.0, &[0.1], r, &[q], &m).unwrap();
            let v1 = a1 * mm + b1 * q + c1 * r + f1;
            let v2 = a2 * mm + b2 * q + c2 * r + f2;
            assert!((v - v1.max(v2)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_convex_and_monotone_in_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let op = BellmanOperator::new(
            2,
            vec![
                Control::constant(
                    "a",
                    SymMat::from_rows(&[vec![1.5, 0.2], vec![0.2, 1.0]], 1e-12).unwrap(),
                    vec![0.1, -0.1],
                    -0.5,
                    0.3,
                ),
                Control::constant("b", SymMat::identity(2), vec![0.0, 0.2], -0.2, -0.1),
            ],
            env(0.5, 2.0),
            Arc::new(|_, _| 1.0),
        )
        .unwrap();
        let x = [0.0, 0.0];
        let q = [0.3, -0.4];
        for _ in 0..60 {
            let m1 = random_sym(&mut rng, 2, 2.0);
            let m2 = random_sym(&mut rng, 2, 2.0);
            let theta: f64 = rng.random_range(0.0..1.0);
            let mix = m1.scale(theta).add_mat(&m2.scale(1.0 - theta));
            let (fm, _) = op.eval_indexed(0.0, &x, 0.5, &q, &mix).unwrap();
            let (f1, _) = op.eval_indexed(0.0, &x, 0.5, &q, &m1).unwrap();
            let (f2, _) = op.eval_indexed(0.0, &x, 0.5, &q, &m2).unwrap();
            assert!(fm <= theta * f1 + (1.0 - theta) * f2 + 1e-10);

            let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut vvt = SymMat::zeros(2);
            for i in 0..2 {
                for j in i..2 {
                    vvt.set(i, j, v[i] * v[j]);
                }
            }
            let bigger = m1.add_mat(&vvt);
            let (fb, _) = op.eval_indexed(0.0, &x, 0.5, &q, &bigger).unwrap();
            assert!(fb >= f1 - 1e-10);
        }
    }

    #[test]
    fn validator_passes_heat_operator() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[5], 3, 1.0).unwrap();
        let op = heat_operator(1);
        let rep = validate_operator(&op, &grid, 200, 4).unwrap();
        assert!(rep.pass(), "unexpected violations: {rep:?}");
        assert_eq!(rep.samples, 200);
        assert!(rep.fitted_lip_r.abs() < 1e-12);
    }

    #[test]
    fn validator_flags_oversized_drift_with_gradient_witness() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[5], 3, 1.0).unwrap();
        let e = EllipticityEnvelope::new(1.0, 1.0, 0.5).unwrap();
        let ctrl = Control::constant("drifty", SymMat::identity(1), vec![1.0], 0.0, 0.0);
        let op = BellmanOperator::new(1, vec![ctrl], e, Arc::new(|_, _| 0.0)).unwrap();
        let rep = validate_operator(&op, &grid, 50, 4).unwrap();
        assert!(rep.sc_violations >= 1);
        let w = rep.worst_sc.unwrap();
        assert_ne!(w.q, w.q_tilde);
    }

    #[test]
    fn validator_flags_kappa_violation() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[5], 3, 1.0).unwrap();
        let e = EllipticityEnvelope::new(1.0, 1.0, 0.0)
            .unwrap()
            .with_kappa(0.0, 0.1)
            .unwrap();
        let ctrl = Control::constant("flat", SymMat::identity(1), vec![0.0], 0.0, 0.0);
        let op = BellmanOperator::new(1, vec![ctrl], e, Arc::new(|_, _| 0.0)).unwrap();
        let rep = validate_operator(&op, &grid, 50, 4).unwrap();
        assert!(rep.monotonicity_violations >= 1);
        assert!(rep.worst_monotonicity.is_some());
    }

    #[test]
    fn validator_flags_growth_violation() {
        let grid = build_grid(&[(-1.0, 1.0)], &[], &[5], 3, 1.0).unwrap();
        let ctrl = Control::constant("src", SymMat::identity(1), vec![0.0], 0.0, 2.0);
        let op = BellmanOperator::new(
            1,
            vec![ctrl],
            env(1.0, 1.0),
            Arc::new(|_, _| 1.0),
        )
        .unwrap();
        let rep = validate_operator(&op, &grid, 30, 4).unwrap();
        assert_eq!(rep.growth_violations, 30);
        let w = rep.worst_growth.unwrap();
        assert_eq!(w.source_value, 2.0);
        assert_eq!(w.bound, 1.0);
    }

    #[test]
    fn validator_is_deterministic() {
        let grid = build_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[], &[5, 5], 3, 1.0).unwrap();
        let op = heat_operator(2);
        let a = validate_operator(&op, &grid, 100, 77).unwrap();
        let b = validate_operator(&op, &grid, 100, 77).unwrap();
        assert_eq!(a.sc_violations, b.sc_violations);
        assert_eq!(a.fitted_lip_q, b.fitted_lip_q);
    }

    #[test]
    fn strict_decrease_holds_for_valid_kappa_operator() {
        let e = EllipticityEnvelope::new(1.0, 2.0, 1.0)
            .unwrap()
            .with_kappa(0.0, 0.1)
            .unwrap();
        let op = BellmanOperator::new(
            1,
            vec![
                Control::constant("a", SymMat::from_diag(&[1.5]), vec![0.5], -0.3, 0.2),
                Control::constant("b", SymMat::from_diag(&[1.0]), vec![-0.2], -0.8, 0.0),
            ],
            e,
            Arc::new(|_, _| 1.0),
        )
        .unwrap();
        let m = SymMat::from_diag(&[0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let r1 = rng.random_range(-3.0..3.0);
            let r2 = r1 + rng.random_range(0.01..2.0);
            let (f1, _) = op.eval_indexed(0.0, &[0.2], r1, &[0.4], &m).unwrap();
            let (f2, _) = op.eval_indexed(0.0, &[0.2], r2, &[0.4], &m).unwrap();
            assert!(f2 - 0.0 * r2 < f1 - 0.0 * r1);
        }
    }

    proptest! {
        #[test]
        fn pucci_duality(entries in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let mut m = SymMat::zeros(3);
            let mut k = 0;
            for i in 0..3 {
                for j in i..3 {
                    m.set(i, j, entries[k]);
                    k += 1;
                }
            }
            let e = env(0.5, 1.7);
            let (pm, pp) = pucci(&m, &e);
            let (npm, npp) = pucci(&m.scale(-1.0), &e);
            prop_assert!((pm + npp).abs() < 1e-12 * (1.0 + pp.abs() + pm.abs()));
            prop_assert!((pp + npm).abs() < 1e-12 * (1.0 + pp.abs() + pm.abs()));
        }

        #[test]
        fn pucci_degenerate_envelope_is_trace(entries in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let m = SymMat::from_diag(&entries);
            let e = env(1.3, 1.3);
            let (pm, pp) = pucci(&m, &e);
            let tr = 1.3 * m.trace();
            prop_assert!((pm - tr).abs() < 1e-12 * (1.0 + tr.abs()));
            prop_assert!((pp - tr).abs() < 1e-12 * (1.0 + tr.abs()));
        }

        #[test]
        fn pucci_subadditive(a in proptest::collection::vec(-3.0f64..3.0, 6),
                             b in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let build = |v: &[f64]| {
                let mut m = SymMat::zeros(3);
                let mut k = 0;
                for i in 0..3 {
                    for j in i..3 {
                        m.set(i, j, v[k]);
                        k += 1;
                    }
                }
                m
            };
            let (ma, mb) = (build(&a), build(&b));
            let e = env(0.4, 2.1);
            let (pma, ppa) = pucci(&ma, &e);
            let (pmb, ppb) = pucci(&mb, &e);
            let (pms, pps) = pucci(&ma.add_mat(&mb), &e);
            let tol = 1e-11 * (1.0 + ppa.abs() + ppb.abs());
            prop_assert!(pps <= ppa + ppb + tol);
            prop_assert!(pms >= pma + pmb - tol);
        }
    }
}
