//! Small dense/banded linear algebra kernels.
//!
//! Everything the solvers need is here: packed symmetric matrices with a
//! Jacobi eigendecomposition (dimensions are tiny, typically d ≤ 4), and a
//! banded LU factorization without pivoting for the per-time-level implicit
//! systems. Pivoting is not needed because every system we assemble is
//! strictly diagonally dominant (the 1/dt term dominates), which makes plain
//! banded elimination backward stable.

use crate::error::{Error, Result};

/// Symmetric d×d matrix stored as the packed upper triangle (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    d: usize,
    a: Vec<f64>,
}

impl SymMat {
    pub fn zeros(d: usize) -> Self {
        SymMat {
            d,
            a: vec![0.0; d * (d + 1) / 2],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = SymMat::zeros(d);
        for i in 0..d {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = SymMat::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Build from a packed upper triangle, row-major:
    /// `[a_00, a_01, .., a_0{d-1}, a_11, a_12, ..]`.
    pub fn from_upper(d: usize, vals: &[f64]) -> Result<Self> {
        if vals.len() != d * (d + 1) / 2 {
            return Err(Error::InvalidMatrix(format!(
                "packed upper triangle for d={} needs {} entries, got {}",
                d,
                d * (d + 1) / 2,
                vals.len()
            )));
        }
        Ok(SymMat {
            d,
            a: vals.to_vec(),
        })
    }

    /// Build from full rows, rejecting asymmetry beyond `sym_tol`.
    pub fn from_rows(rows: &[Vec<f64>], sym_tol: f64) -> Result<Self> {
        let d = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::InvalidMatrix(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    d
                )));
            }
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (rows[i][j] - rows[j][i]).abs() > sym_tol {
                    return Err(Error::InvalidMatrix(format!(
                        "asymmetric input: |a[{i}][{j}] - a[{j}][{i}]| = {:e} > {:e}",
                        (rows[i][j] - rows[j][i]).abs(),
                        sym_tol
                    )));
                }
            }
        }
        let mut m = SymMat::zeros(d);
        for i in 0..d {
            for j in i..d {
                m.set(i, j, 0.5 * (rows[i][j] + rows[j][i]));
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.d - i * (i + 1) / 2 + j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.a[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.a[k] += v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: f64) -> SymMat {
        SymMat {
            d: self.d,
            a: self.a.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add_mat(&self, other: &SymMat) -> SymMat {
        debug_assert_eq!(self.d, other.d);
        SymMat {
            d: self.d,
            a: self
                .a
                .iter()
                .zip(other.a.iter())
                .map(|(x, y)| x + y)
                .collect(),
        }
    }

    /// tr(A·M) for symmetric A, M of equal dimension.
    pub fn dot(&self, other: &SymMat) -> f64 {
        debug_assert_eq!(self.d, other.d);
        let mut s = 0.0;
        for i in 0..self.d {
            s += self.get(i, i) * other.get(i, i);
            for j in (i + 1)..self.d {
                s += 2.0 * self.get(i, j) * other.get(i, j);
            }
        }
        s
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigen().0
    }

    /// Full eigendecomposition by cyclic Jacobi rotations; returns
    /// `(eigenvalues ascending, eigenvectors)` with `vectors[k]` the unit
    /// eigenvector for `values[k]`.
    pub fn eigen(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.d;
        if d == 1 {
            return (vec![self.get(0, 0)], vec![vec![1.0]]);
        }
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = self.get(i, j);
            }
        }
        let mut v = vec![vec![0.0; d]; d];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let scale: f64 = a
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        for _sweep in 0..64 {
            let mut off = 0.0;
            for i in 0..d {
                for j in (i + 1)..d {
                    off += a[i][j] * a[i][j];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    if a[p][q].abs() <= 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let vp = row[p];
                        let vq = row[q];
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
        let values: Vec<f64> = order.iter().map(|&k| a[k][k]).collect();
        let vectors: Vec<Vec<f64>> = order
            .iter()
            .map(|&k| (0..d).map(|i| v[i][k]).collect())
            .collect();
        (values, vectors)
    }
}

/// Square banded matrix with half-bandwidth `w`: entries with |i−j| > w are
/// structurally zero. Row-major storage, row `i` holds columns `i−w ..= i+w`.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    w: usize,
    rows: Vec<f64>,
}

impl Banded {
    pub fn new(n: usize, w: usize) -> Self {
        Banded {
            n,
            w,
            rows: vec![0.0; n * (2 * w + 1)],
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(j + self.w >= i && j <= i + self.w, "outside band");
        i * (2 * self.w + 1) + (j + self.w - i)
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.offset(i, j);
        self.rows[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.offset(i, j);
        self.rows[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.w < i || j > i + self.w {
            0.0
        } else {
            self.rows[self.offset(i, j)]
        }
    }

    /// In-place LU without pivoting. Intended for strictly diagonally
    /// dominant systems; fails on a vanishing pivot.
    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, w) = (self.n, self.w);
        for k in 0..n {
            let pivot = self.get(k, k);
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::SingularSystem(format!(
                    "pivot {pivot:e} at row {k} of {n}"
                )));
            }
            let imax = (k + w).min(n - 1);
            for i in (k + 1)..=imax {
                let l = self.get(i, k) / pivot;
                self.set(i, k, l);
                if l != 0.0 {
                    let jmax = (k + w).min(n - 1);
                    for j in (k + 1)..=jmax {
                        let ukj = self.get(k, j);
                        if ukj != 0.0 {
                            self.add(i, j, -l * ukj);
                        }
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            w,
            rows: self.rows,
        })
    }
}

/// Factored form produced by [`Banded::factor`]; unit-lower L below the
/// diagonal, U on and above it.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    w: usize,
    rows: Vec<f64>,
}

impl BandedLu {
    fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.w < i || j > i + self.w {
            0.0
        } else {
            self.rows[i * (2 * self.w + 1) + (j + self.w - i)]
        }
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n, "rhs length mismatch");
        let (n, w) = (self.n, self.w);
        for i in 0..n {
            let jlo = i.saturating_sub(w);
            let mut s = x[i];
            for j in jlo..i {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let jhi = (i + w).min(n - 1);
            let mut s = x[i];
            for j in (i + 1)..=jhi {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s / self.get(i, i);
        }
    }
}

/// Max-norm of a slice (0 for empty input).
pub fn sup_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Max-norm distance between two equally long slices.
pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
