//! Symmetric and symmetric positive definite matrices.
//!
//! Storage keeps only the upper triangle. For 3x3 tensors the packed
//! vector order is `(d11, d22, d33, d12, d13, d23)`, which is also the
//! order used by the regression design.
//!
//! All matrix functions go through a cyclic Jacobi eigensolver:
//!
//! ```text
//! f(X) = E diag(f(l_1), ..., f(l_n)) E^T
//! ```

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, MAX_DIM};

/// Default floor on eigenvalues accepted by [`SpdTensor::new`].
pub const SPD_FLOOR: f64 = 1e-12;

const PACKED_LEN: usize = MAX_DIM * (MAX_DIM + 1) / 2;
const MAX_SWEEPS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    LogEuclidean,
    Affine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::LogEuclidean, Metric::Affine];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::LogEuclidean => "log_euclidean",
            Metric::Affine => "affine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "log_euclidean" | "log-euclidean" => Ok(Metric::LogEuclidean),
            "affine" => Ok(Metric::Affine),
            other => Err(Error::InvalidInput(format!("unknown metric '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// SymMatrix

#[derive(Clone, Copy, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: [f64; PACKED_LEN],
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "dimension {n} out of range");
        SymMatrix {
            n,
            data: [0.0; PACKED_LEN],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut s = Self::zeros(n);
        for i in 0..n {
            s.set(i, i, 1.0);
        }
        s
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut s = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            s.set(i, i, *v);
        }
        s
    }

    /// Build from the upper triangle; `f` is only called with `i <= j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut s = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                s.set(i, j, f(i, j));
            }
        }
        s
    }

    /// Symmetric part `(M + M^T) / 2` of a dense matrix.
    pub fn from_dense(m: &Mat) -> Self {
        Self::from_fn(m.dim(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    /// 3x3 tensor from `(d11, d22, d33, d12, d13, d23)`.
    pub fn from_tensor_vec(v: &[f64; 6]) -> Self {
        let mut s = Self::zeros(3);
        s.set(0, 0, v[0]);
        s.set(1, 1, v[1]);
        s.set(2, 2, v[2]);
        s.set(0, 1, v[3]);
        s.set(0, 2, v[4]);
        s.set(1, 2, v[5]);
        s
    }

    pub fn to_tensor_vec(&self) -> [f64; 6] {
        assert_eq!(self.n, 3, "tensor vectors are 3x3 only");
        [
            self.get(0, 0),
            self.get(1, 1),
            self.get(2, 2),
            self.get(0, 1),
            self.get(0, 2),
            self.get(1, 2),
        ]
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.n && j < self.n);
        self.data[upper_index(self.n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        self.data[upper_index(self.n, i, j)] = v;
    }

    /// Packed upper triangle, row by row.
    pub fn packed(&self) -> &[f64] {
        &self.data[..self.n * (self.n + 1) / 2]
    }

    pub fn to_dense(&self) -> Mat {
        Mat::from_fn(self.n, |i, j| self.get(i, j))
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.get(i, j);
                s += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        s.sqrt()
    }

    /// `<self, other>_F = tr(self other)`.
    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        let mut s = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.get(i, j) * other.get(i, j);
                s += if i == j { v } else { 2.0 * v };
            }
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.packed().iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        let len = self.packed().len();
        out.data[..len].iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self += w * other`.
    pub fn axpy(&mut self, w: f64, other: &SymMatrix) {
        assert_eq!(self.n, other.n);
        let len = self.packed().len();
        for k in 0..len {
            self.data[k] += w * other.data[k];
        }
    }

    /// `a * self * a` for symmetric `a`; the result is symmetrized.
    pub fn congruence(&self, a: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, a.n);
        let n = self.n;
        let mut t = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a.get(i, k) * self.get(k, j);
                }
                t[i][j] = s;
            }
        }
        SymMatrix::from_fn(n, |i, j| {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for k in 0..n {
                s1 += t[i][k] * a.get(k, j);
                s2 += t[j][k] * a.get(k, i);
            }
            0.5 * (s1 + s2)
        })
    }

    /// Eigenvalues in non-increasing order with unit eigenvectors.
    pub fn eig(&self) -> Result<EigDecomp> {
        sym_eig(self)
    }

    /// Determinant from the eigenvalues.
    pub fn det(&self) -> Result<f64> {
        Ok(self.eig()?.values().iter().product())
    }

    /// Apply `f` to the spectrum.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
        Ok(self.eig()?.map(f))
    }

    /// Symmetric matrix exponential.
    pub fn exp(&self) -> Result<SymMatrix> {
        self.apply(f64::exp)
    }

    /// Spectral norm.
    pub fn operator_norm(&self) -> Result<f64> {
        let e = self.eig()?;
        let v = e.values();
        Ok(v[0].abs().max(v[self.n - 1].abs()))
    }

    pub fn is_spd(&self) -> bool {
        self.is_finite() && self.to_dense().cholesky().is_ok()
    }
}

#[inline]
fn upper_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // Row r of the upper triangle starts after sum_{k<r} (n - k) entries.
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymMatrix(")?;
        for i in 0..self.n {
            let row: Vec<f64> = (0..self.n).map(|j| self.get(i, j)).collect();
            write!(f, "{row:?}")?;
            if i + 1 < self.n {
                write!(f, ", ")?;
            }
        }
        write!(f, ")")
    }
}

impl Add for SymMatrix {
    type Output = SymMatrix;
    fn add(mut self, rhs: SymMatrix) -> SymMatrix {
        self.axpy(1.0, &rhs);
        self
    }
}

impl Sub for SymMatrix {
    type Output = SymMatrix;
    fn sub(mut self, rhs: SymMatrix) -> SymMatrix {
        self.axpy(-1.0, &rhs);
        self
    }
}

impl Mul<f64> for SymMatrix {
    type Output = SymMatrix;
    fn mul(self, s: f64) -> SymMatrix {
        self.scale(s)
    }
}

// ---------------------------------------------------------------------------
// Eigendecomposition

#[derive(Clone, Copy, Debug)]
pub struct EigDecomp {
    n: usize,
    values: [f64; MAX_DIM],
    /// Eigenvectors as columns.
    vectors: Mat,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values[..self.n]
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> [f64; MAX_DIM] {
        self.vectors.column(k)
    }

    /// `sum_k f(l_k) v_k v_k^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.n;
        let mut fv = [0.0; MAX_DIM];
        for k in 0..n {
            fv[k] = f(self.values[k]);
        }
        let v = &self.vectors;
        SymMatrix::from_fn(n, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                s += fv[k] * v[(i, k)] * v[(j, k)];
            }
            s
        })
    }

    pub fn condition_number(&self) -> f64 {
        let v = self.values();
        let hi = v[0].abs().max(v[self.n - 1].abs());
        let lo = v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted non-increasing (ties keep the diagonal order);
/// each eigenvector has its first non-negligible component positive.
pub fn sym_eig(s: &SymMatrix) -> Result<EigDecomp> {
    if !s.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = s.dim();
    let mut a = s.to_dense();
    let mut v = Mat::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        let mut diag = 0.0;
        for p in 0..n {
            diag += a[(p, p)] * a[(p, p)];
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off == 0.0 || off <= 1e-34 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Element far below both diagonal entries: drop it.
                if apq.abs() < 1e-18 * app.abs().min(aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order = [0usize; MAX_DIM];
    for (k, o) in order.iter_mut().enumerate().take(n) {
        *o = k;
    }
    order[..n].sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap().then(i.cmp(&j)));

    let mut values = [0.0; MAX_DIM];
    let mut vectors = Mat::zeros(n);
    for (dst, &src) in order[..n].iter().enumerate() {
        values[dst] = a[(src, src)];
        let col = v.column(src);
        let scale = col[..n].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lead = col[..n]
            .iter()
            .find(|x| x.abs() > 1e-12 * scale)
            .copied()
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * col[i];
        }
    }
    Ok(EigDecomp { n, values, vectors })
}

// ---------------------------------------------------------------------------
// SpdTensor

#[derive(Clone, Copy, PartialEq)]
pub struct SpdTensor(SymMatrix);

impl fmt::Debug for SpdTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Spd{:?}", self.0)
    }
}

impl SpdTensor {
    pub fn new(s: SymMatrix) -> Result<Self> {
        Self::with_floor(s, SPD_FLOOR)
    }

    /// Accept `s` only if every eigenvalue exceeds `floor`.
    pub fn with_floor(s: SymMatrix, floor: f64) -> Result<Self> {
        let e = sym_eig(&s)?;
        let min = e.values()[e.dim() - 1];
        if min > floor {
            Ok(SpdTensor(s))
        } else {
            Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
                floor,
            })
        }
    }

    pub fn from_diag(values: &[f64]) -> Result<Self> {
        Self::new(SymMatrix::from_diag(values))
    }

    pub fn identity(n: usize) -> Self {
        SpdTensor(SymMatrix::identity(n))
    }

    /// Wrap a matrix that is positive definite by construction (e.g. an
    /// exponential), skipping the floor check.
    pub(crate) fn from_sym_unchecked(s: SymMatrix) -> Self {
        SpdTensor(s)
    }

    #[inline]
    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    #[inline]
    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn eig(&self) -> EigDecomp {
        // Finite by construction, so the solver cannot fail.
        sym_eig(&self.0).expect("SPD tensor has finite entries")
    }

    pub fn det(&self) -> f64 {
        self.eig().values().iter().product()
    }

    pub fn log(&self) -> SymMatrix {
        mat_log(self)
    }

    pub fn sqrt(&self) -> SpdTensor {
        SpdTensor(self.eig().map(f64::sqrt))
    }

    pub fn inv_sqrt(&self) -> SpdTensor {
        SpdTensor(self.eig().map(|l| 1.0 / l.sqrt()))
    }

    pub fn inverse(&self) -> SpdTensor {
        SpdTensor(self.eig().map(|l| 1.0 / l))
    }

    pub fn powf(&self, t: f64) -> SpdTensor {
        SpdTensor(self.eig().map(|l| l.powf(t)))
    }

    /// Square root and inverse square root from one decomposition.
    pub fn sqrt_pair(&self) -> (SpdTensor, SpdTensor) {
        let e = self.eig();
        (
            SpdTensor(e.map(f64::sqrt)),
            SpdTensor(e.map(|l| 1.0 / l.sqrt())),
        )
    }
}

impl From<SpdTensor> for SymMatrix {
    fn from(t: SpdTensor) -> SymMatrix {
        t.0
    }
}

pub fn mat_log(x: &SpdTensor) -> SymMatrix {
    x.eig().map(f64::ln)
}

pub fn mat_exp(m: &SymMatrix) -> Result<SpdTensor> {
    Ok(SpdTensor(m.exp()?))
}

// ---------------------------------------------------------------------------
// Distances and affine-invariant maps

/// Distance between two tensors under `metric`.
pub fn distance(metric: Metric, x: &SpdTensor, y: &SpdTensor) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(match metric {
        Metric::Euclidean => (*x.as_sym() - *y.as_sym()).frobenius_norm(),
        Metric::LogEuclidean => (mat_log(x) - mat_log(y)).frobenius_norm(),
        Metric::Affine => affine_distance(x, y),
    })
}

/// `|| log(X^{-1/2} Y X^{-1/2}) ||_F`.
///
/// Eigenvalues below one are taken as reciprocals of the eigenvalues of
/// `Y^{-1/2} X Y^{-1/2}`: Jacobi resolves large eigenvalues to full relative
/// precision but small ones only to `eps * max`. This also makes the result
/// symmetric in its arguments up to rounding.
pub fn affine_distance(x: &SpdTensor, y: &SpdTensor) -> f64 {
    let forward = relative_spectrum(x, y);
    let backward = relative_spectrum(y, x);
    let n = x.dim();
    let mut acc = 0.0;
    // forward is descending in mu, backward descending in 1/mu.
    for k in 0..n {
        let l = if forward[k] >= 1.0 { forward[k].ln() } else { backward[n - 1 - k].ln() };
        acc += l * l;
    }
    acc.sqrt()
}

fn relative_spectrum(x: &SpdTensor, y: &SpdTensor) -> [f64; MAX_DIM] {
    let c = y.as_sym().congruence(x.inv_sqrt().as_sym());
    let mut v = [0.0; MAX_DIM];
    v[..x.dim()].copy_from_slice(sym_eig(&c).expect("finite congruence").values());
    v
}

/// `X^{1/2} exp(X^{-1/2} S X^{-1/2}) X^{1/2}`.
pub fn affine_exp_map(x: &SpdTensor, s: &SymMatrix) -> Result<SpdTensor> {
    check_dims(x.dim(), s.dim())?;
    let (xs, xi) = x.sqrt_pair();
    let inner = s.congruence(xi.as_sym()).exp()?;
    Ok(SpdTensor(inner.congruence(xs.as_sym())))
}

/// `X^{1/2} log(X^{-1/2} Y X^{-1/2}) X^{1/2}`.
pub fn affine_log_map(x: &SpdTensor, y: &SpdTensor) -> Result<SymMatrix> {
    check_dims(x.dim(), y.dim())?;
    let (xs, xi) = x.sqrt_pair();
    let inner = y.as_sym().congruence(xi.as_sym()).apply(f64::ln)?;
    Ok(inner.congruence(xs.as_sym()))
}

/// Point at fraction `t` of the affine-invariant geodesic from `x` to `y`.
pub fn affine_geodesic(x: &SpdTensor, y: &SpdTensor, t: f64) -> Result<SpdTensor> {
    check_dims(x.dim(), y.dim())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            expected: "0 <= t <= 1",
        });
    }
    Ok(geodesic_step(x, y, t))
}

/// Geodesic point without argument checks; used inside hot loops.
pub(crate) fn geodesic_step(x: &SpdTensor, y: &SpdTensor, t: f64) -> SpdTensor {
    let (xs, xi) = x.sqrt_pair();
    let c = y.as_sym().congruence(xi.as_sym());
    let ct = sym_eig(&c).expect("finite congruence").map(|l| l.powf(t));
    SpdTensor(ct.congruence(xs.as_sym()))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::DimensionMismatch { left: a, right: b })
    } else {
        Ok(())
    }
}

/// Clamp eigenvalues from below at `floor`.
pub fn project_spd(s: &SymMatrix, floor: f64) -> Result<SpdTensor> {
    let e = s.eig()?;
    Ok(SpdTensor(e.map(|l| l.max(floor))))
}
