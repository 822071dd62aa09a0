//! Second-order expansions of log-Euclidean and affine-invariant means
//! around the Euclidean mean, checked numerically on finite ensembles.
//!
//! With `S = Sbar + B`, `E(B) = 0` and `Sbar = sum_j l_j P_j`:
//!
//! ```text
//! log S_le  - log Sbar ~ E[ sum_{j,k,m} f2(l_j, l_k, l_m) P_j B P_k B P_m ]
//! S_aff             ~ Sbar - E(B Sbar^{-1} B) / 2
//! log S_aff - log Sbar ~ sum_{j,k} f1(l_j, l_k) P_j (S_aff - Sbar) P_k
//! ```
//!
//! where `f1`, `f2` are divided differences of `log`. For simple spectra
//! these reduce to the closed forms written with the reduced resolvents
//! `H_j = sum_{k != j} P_k / (l_k - l_j)`; for isotropic means to
//! `-E(B^2) / (2 l^2)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::karcher::WeightedEnsemble;
use crate::linalg::Mat;
use crate::rng::RngSpec;
use crate::spd::{SpdTensor, SymMatrix};

/// Relative tolerance for treating two eigenvalues as equal.
pub const DISTINCT_TOL: f64 = 1e-9;
/// Families are rejected when an eigen-gap is below `GAP_GUARD * t`.
pub const GAP_GUARD: f64 = 10.0;
/// Members are scaled so that `max ||B|| = FILL * t / C`.
const FILL: f64 = 0.9;
/// Multiplicative spread `c_j = MULT_FILL / (C delta_j)`.
const MULT_FILL: f64 = 0.5;
/// Quadratic skew applied to unit-spread draws.
pub const DEFAULT_SKEW: f64 = 0.5;
const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_MAX_ITER: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyStyle {
    AdditiveSymmetric,
    Multiplicative,
}

impl FamilyStyle {
    pub const ALL: [FamilyStyle; 2] = [FamilyStyle::AdditiveSymmetric, FamilyStyle::Multiplicative];

    pub fn name(&self) -> &'static str {
        match self {
            FamilyStyle::AdditiveSymmetric => "additive_symmetric",
            FamilyStyle::Multiplicative => "multiplicative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumCase {
    /// All eigenvalues simple.
    Distinct,
    Isotropic,
    /// Some but not all eigenvalues repeated.
    Mixed,
}

impl SpectrumCase {
    pub fn name(&self) -> &'static str {
        match self {
            SpectrumCase::Distinct => "distinct",
            SpectrumCase::Isotropic => "isotropic",
            SpectrumCase::Mixed => "mixed",
        }
    }
}

/// Distinct eigenvalues (non-increasing) with their eigenprojections.
#[derive(Clone, Debug)]
pub struct MeanSpectrum {
    pub values: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub projections: Vec<Mat>,
    /// `H_j = sum_{k != j} P_k / (l_k - l_j)`.
    pub resolvents: Vec<Mat>,
    pub case: SpectrumCase,
    /// Spread constant: `max(1/l_j, 1/|l_k - l_j|)`, or `1/l` if isotropic.
    pub c: f64,
}

impl MeanSpectrum {
    pub fn new(s: &SpdTensor) -> Result<Self> {
        let e = s.eig();
        let n = s.dim();
        let vals = e.values();
        let tol = DISTINCT_TOL * vals[0];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for k in 0..n {
            match groups.last_mut() {
                Some(g) if vals[g[g.len() - 1]] - vals[k] <= tol => g.push(k),
                _ => groups.push(vec![k]),
            }
        }
        let values: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|k| vals[*k]).sum::<f64>() / g.len() as f64)
            .collect();
        let projections: Vec<Mat> = groups
            .iter()
            .map(|g| {
                g.iter().fold(Mat::zeros(n), |acc, k| {
                    let v = e.vector(*k);
                    acc + Mat::outer(&v[..n], &v[..n])
                })
            })
            .collect();
        let resolvents = (0..values.len())
            .map(|j| {
                (0..values.len())
                    .filter(|k| *k != j)
                    .fold(Mat::zeros(n), |acc, k| acc + projections[k].scale(1.0 / (values[k] - values[j])))
            })
            .collect();
        let case = if values.len() == 1 {
            SpectrumCase::Isotropic
        } else if values.len() == n {
            SpectrumCase::Distinct
        } else {
            SpectrumCase::Mixed
        };
        let mut c = values.iter().map(|l| 1.0 / l).fold(0.0, f64::max);
        for j in 0..values.len() {
            for k in (j + 1)..values.len() {
                c = c.max(1.0 / (values[j] - values[k]).abs());
            }
        }
        Ok(MeanSpectrum {
            multiplicities: groups.iter().map(|g| g.len()).collect(),
            values,
            projections,
            resolvents,
            case,
            c,
        })
    }

    /// Smallest gap between distinct eigenvalues (infinite if isotropic).
    pub fn min_gap(&self) -> f64 {
        self.values.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
    }
}

/// A finite, uniformly weighted ensemble `S_i = Sbar + B_i`.
#[derive(Clone, Debug)]
pub struct PerturbationFamily {
    pub style: FamilyStyle,
    pub t: f64,
    /// The tensor the family was built around (`S*` for multiplicative families).
    pub base: SpdTensor,
    pub members: Vec<SpdTensor>,
    /// Euclidean mean of the members.
    pub mean: SpdTensor,
    pub spectrum: MeanSpectrum,
    /// `B_i` as dense matrices.
    pub deviations: Vec<Mat>,
    /// Multiplicative spreads `c_j` per eigenvalue of the base (empty otherwise).
    pub spreads: Vec<f64>,
}

/// Unit-spread draws, reused across `t` so that halving `t` rescales the
/// same ensemble.
#[derive(Clone, Debug)]
pub struct FamilyShape {
    pub style: FamilyStyle,
    pub base: SpdTensor,
    /// Additive: packed symmetric matrices with `max ||V_i|| = FILL / C`.
    /// Multiplicative: per-member exponents in `[-1, 1]`, one per distinct eigenvalue.
    draws: Vec<Vec<f64>>,
    base_spectrum: MeanSpectrum,
}

impl FamilyShape {
    /// Draw `size` centered perturbations with the default skew.
    pub fn draw<R: Rng>(base: &SpdTensor, size: usize, style: FamilyStyle, rng: &mut R) -> Result<Self> {
        Self::draw_skewed(base, size, style, DEFAULT_SKEW, rng)
    }

    /// Draw `size` centered perturbations `V = U + skew (U^2 - mean U^2)`.
    ///
    /// Additive: `U` are symmetric Gaussian matrices, centered and scaled
    /// to unit operator norm. Multiplicative: `U` are centered uniform
    /// exponents on `[-1, 1]`, one per distinct eigenvalue so repeated
    /// eigenvalues stay repeated. A symmetric `U` alone has no third
    /// moment, which would push expansion residuals to fourth order.
    pub fn draw_skewed<R: Rng>(base: &SpdTensor, size: usize, style: FamilyStyle, skew: f64, rng: &mut R) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput("a family needs at least two members".into()));
        }
        let n = base.dim();
        let spec = MeanSpectrum::new(base)?;
        let draws = match style {
            FamilyStyle::AdditiveSymmetric => {
                let m = n * (n + 1) / 2;
                let mut raw: Vec<Vec<f64>> = (0..size)
                    .map(|_| (0..m).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
                    .collect();
                center(&mut raw);
                let mats: Vec<SymMatrix> = raw.iter().map(|u| sym_from_packed(n, u)).collect();
                let peak = max_norm(&mats)?;
                let mats: Vec<Mat> = mats.iter().map(|u| u.scale(1.0 / peak).to_dense()).collect();
                let squares: Vec<Mat> = mats.iter().map(|u| u * u).collect();
                let mean_sq = squares.iter().fold(Mat::zeros(n), |a, q| a + *q).scale(1.0 / size as f64);
                let skewed: Vec<SymMatrix> = mats
                    .iter()
                    .zip(&squares)
                    .map(|(u, q)| SymMatrix::from_dense(&(*u + (*q - mean_sq).scale(skew))))
                    .collect();
                let scale = FILL / (spec.c * max_norm(&skewed)?);
                skewed.iter().map(|v| v.scale(scale).packed().to_vec()).collect()
            }
            FamilyStyle::Multiplicative => {
                let groups = spec.multiplicities.len();
                let mut raw: Vec<Vec<f64>> = (0..size)
                    .map(|_| (0..groups).map(|_| rng.random_range(-1.0..=1.0)).collect())
                    .collect();
                center(&mut raw);
                let mut sq: Vec<Vec<f64>> = raw.iter().map(|u| u.iter().map(|v| v * v).collect()).collect();
                center(&mut sq);
                for (u, q) in raw.iter_mut().zip(&sq) {
                    for (v, w) in u.iter_mut().zip(q) {
                        *v += skew * w;
                    }
                }
                let peak = raw.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                if peak > 1.0 {
                    for u in &mut raw {
                        for v in u.iter_mut() {
                            *v /= peak;
                        }
                    }
                }
                raw
            }
        };
        Ok(FamilyShape {
            style,
            base: *base,
            draws,
            base_spectrum: spec,
        })
    }

    pub fn size(&self) -> usize {
        self.draws.len()
    }

    /// The family at spread `t`.
    pub fn at(&self, t: f64) -> Result<PerturbationFamily> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::OutOfRange {
                name: "t",
                value: t,
                expected: "t >= 0",
            });
        }
        let gap = self.base_spectrum.min_gap();
        if gap < GAP_GUARD * t {
            return Err(Error::NearDegenerate {
                gap,
                guard: GAP_GUARD * t,
            });
        }
        let n = self.base.dim();
        let spec = &self.base_spectrum;
        let mut spreads = Vec::new();
        let members: Vec<SymMatrix> = match self.style {
            FamilyStyle::AdditiveSymmetric => self
                .draws
                .iter()
                .map(|u| *self.base.as_sym() + sym_from_packed(n, u).scale(t))
                .collect(),
            FamilyStyle::Multiplicative => {
                spreads = spec.values.iter().map(|d| MULT_FILL / (spec.c * d)).collect();
                self.draws
                    .iter()
                    .map(|z| {
                        let mut s = Mat::zeros(n);
                        for (j, p) in spec.projections.iter().enumerate() {
                            let factor = spec.values[j] * (spreads[j] * t * z[j]).exp();
                            s = s + p.scale(factor);
                        }
                        SymMatrix::from_dense(&s)
                    })
                    .collect()
            }
        };
        let members: Vec<SpdTensor> = members.into_iter().map(SpdTensor::new).collect::<Result<_>>()?;
        let ens = WeightedEnsemble::uniform(members.clone())?;
        let mean = ens.mean_euclidean();
        let spectrum = MeanSpectrum::new(&mean)?;
        let deviations: Vec<Mat> = members
            .iter()
            .map(|m| (*m.as_sym() - *mean.as_sym()).to_dense())
            .collect();
        // Spread condition against the constant of the actual mean.
        let bound = t / spectrum.c;
        for b in &deviations {
            let norm = SymMatrix::from_dense(b).operator_norm()?;
            if t > 0.0 && !(norm < bound) {
                return Err(Error::InvalidInput(format!(
                    "member deviation {norm:e} violates the spread bound {bound:e}"
                )));
            }
        }
        Ok(PerturbationFamily {
            style: self.style,
            t,
            base: self.base,
            members,
            mean,
            spectrum,
            deviations,
            spreads,
        })
    }
}

fn max_norm(mats: &[SymMatrix]) -> Result<f64> {
    mats.iter().map(|m| m.operator_norm()).try_fold(0.0f64, |a, v| v.map(|v| a.max(v)))
}

fn center(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let m = rows[0].len();
    for k in 0..m {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        for r in rows.iter_mut() {
            r[k] -= mean;
        }
    }
}

fn sym_from_packed(n: usize, u: &[f64]) -> SymMatrix {
    let mut s = SymMatrix::zeros(n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            s.set(i, j, u[k]);
            k += 1;
        }
    }
    s
}

/// Build a family directly: `size` members at spread `t`.
pub fn make_family(base: &SpdTensor, t: f64, size: usize, style: FamilyStyle, rng: &RngSpec) -> Result<PerturbationFamily> {
    FamilyShape::draw(base, size, style, &mut rng.stream(0, 0))?.at(t)
}

impl PerturbationFamily {
    fn average(&self, f: impl Fn(&Mat) -> Mat) -> Mat {
        let n = self.mean.dim();
        let sum = self.deviations.iter().fold(Mat::zeros(n), |acc, b| acc + f(b));
        sum.scale(1.0 / self.deviations.len() as f64)
    }

    /// `E(B X B)`.
    pub fn second_moment(&self, x: &Mat) -> Mat {
        self.average(|b| (b * x) * b)
    }

    pub fn exact_log_euclidean(&self) -> Result<SpdTensor> {
        WeightedEnsemble::uniform(self.members.clone())?.mean_log_euclidean()
    }

    pub fn exact_affine(&self) -> Result<SpdTensor> {
        Ok(WeightedEnsemble::uniform(self.members.clone())?
            .mean_affine_fixed_point(FIXED_POINT_TOL, FIXED_POINT_MAX_ITER)?
            .mean)
    }
}

fn prod(factors: &[&Mat]) -> Mat {
    factors[1..].iter().fold(*factors[0], |acc, f| acc * *f)
}

fn log_dd1(a: f64, b: f64) -> f64 {
    if a == b {
        1.0 / a
    } else {
        (a.ln() - b.ln()) / (a - b)
    }
}

/// Second divided difference of `log`; equal arguments are exactly equal
/// here because they come from grouped eigenvalues.
fn log_dd2(a: f64, b: f64, c: f64) -> f64 {
    if a != c {
        (log_dd1(a, b) - log_dd1(b, c)) / (a - c)
    } else if a != b {
        (log_dd1(a, b) - 1.0 / a) / (b - a)
    } else {
        -0.5 / (a * a)
    }
}

/// `sum_{j,k} f1(l_j, l_k) P_j X P_k`.
fn log_first_order(spec: &MeanSpectrum, x: &Mat) -> Mat {
    let n = x.dim();
    let mut out = Mat::zeros(n);
    for (j, pj) in spec.projections.iter().enumerate() {
        let left = pj * x;
        for (k, pk) in spec.projections.iter().enumerate() {
            out = out + (left * pk).scale(log_dd1(spec.values[j], spec.values[k]));
        }
    }
    out
}

/// `E sum_{j,k,m} f2(l_j, l_k, l_m) P_j B P_k B P_m`, valid for any
/// multiplicity pattern.
pub fn log_euclidean_general(fam: &PerturbationFamily) -> SymMatrix {
    let spec = &fam.spectrum;
    let n = fam.mean.dim();
    let mut out = Mat::zeros(n);
    for (k, pk) in spec.projections.iter().enumerate() {
        let middle = fam.second_moment(pk);
        for (j, pj) in spec.projections.iter().enumerate() {
            let left = pj * middle;
            for (m, pm) in spec.projections.iter().enumerate() {
                let c = log_dd2(spec.values[j], spec.values[k], spec.values[m]);
                out = out + (left * pm).scale(c);
            }
        }
    }
    SymMatrix::from_dense(&out)
}

/// Closed form for simple spectra, term by term.
pub fn log_euclidean_distinct(fam: &PerturbationFamily) -> Result<SymMatrix> {
    let spec = &fam.spectrum;
    if spec.case != SpectrumCase::Distinct {
        return Err(Error::UnsupportedSpectrum);
    }
    let n = fam.mean.dim();
    let mut out = Mat::zeros(n);
    for j in 0..spec.values.len() {
        let (l, p, h) = (spec.values[j], &spec.projections[j], &spec.resolvents[j]);
        let h2 = h * h;
        let (mut tr_pbhb, mut tr_pb_sq) = (0.0, 0.0);
        let mut logs = Mat::zeros(n);
        let mut cross = Mat::zeros(n);
        for b in &fam.deviations {
            let tr_pb = (p * b).trace();
            tr_pbhb += prod(&[p, b, h, b]).trace();
            tr_pb_sq += tr_pb * tr_pb;
            logs = logs + prod(&[p, b, h, b, h]) + prod(&[h, b, p, b, h]) + prod(&[h, b, h, b, p])
                - prod(&[p, b, p, b, &h2])
                - prod(&[p, b, &h2, b, p])
                - prod(&[&h2, b, p, b, p]);
            cross = cross + (prod(&[p, b, h]) + prod(&[h, b, p])).scale(tr_pb);
        }
        let m = fam.deviations.len() as f64;
        out = out + p.scale(-tr_pbhb / (l * m)) + p.scale(-0.5 * tr_pb_sq / (l * l * m)) + logs.scale(l.ln() / m)
            - cross.scale(1.0 / (l * m));
    }
    Ok(SymMatrix::from_dense(&out))
}

/// `-E(B^2) / (2 l^2)` for an isotropic mean.
pub fn isotropic_prediction(fam: &PerturbationFamily) -> Result<SymMatrix> {
    let spec = &fam.spectrum;
    if spec.case != SpectrumCase::Isotropic {
        return Err(Error::UnsupportedSpectrum);
    }
    let l = spec.values[0];
    let eb2 = fam.average(|b| b * b);
    Ok(SymMatrix::from_dense(&eb2.scale(-0.5 / (l * l))))
}

/// Predicted `log S_le - log Sbar`.
pub fn expansion_log_euclidean(fam: &PerturbationFamily) -> Result<SymMatrix> {
    match fam.spectrum.case {
        SpectrumCase::Distinct => log_euclidean_distinct(fam),
        SpectrumCase::Isotropic => isotropic_prediction(fam),
        SpectrumCase::Mixed => Ok(log_euclidean_general(fam)),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffinePrediction {
    /// Predicted `log S_aff - log Sbar`.
    pub log_prediction: SymMatrix,
    /// `Sbar - E(B Sbar^{-1} B) / 2`.
    pub mean_prediction: SymMatrix,
}

fn affine_shift(fam: &PerturbationFamily) -> Mat {
    let inv = fam.mean.inverse().into_sym().to_dense();
    fam.second_moment(&inv).scale(-0.5)
}

/// Block form valid for any multiplicity pattern.
pub fn affine_log_general(fam: &PerturbationFamily) -> SymMatrix {
    SymMatrix::from_dense(&log_first_order(&fam.spectrum, &affine_shift(fam)))
}

/// Closed form for simple spectra.
pub fn affine_log_distinct(fam: &PerturbationFamily) -> Result<SymMatrix> {
    let spec = &fam.spectrum;
    if spec.case != SpectrumCase::Distinct {
        return Err(Error::UnsupportedSpectrum);
    }
    let inv = fam.mean.inverse().into_sym().to_dense();
    let bsb = fam.second_moment(&inv);
    let n = fam.mean.dim();
    let mut out = Mat::zeros(n);
    for j in 0..spec.values.len() {
        let (l, p, h) = (spec.values[j], &spec.projections[j], &spec.resolvents[j]);
        out = out + p.scale(-0.5 * (p * bsb).trace() / l) + (prod(&[p, &bsb, h]) + prod(&[h, &bsb, p])).scale(0.5 * l.ln());
    }
    Ok(SymMatrix::from_dense(&out))
}

pub fn expansion_affine(fam: &PerturbationFamily) -> Result<AffinePrediction> {
    let log_prediction = match fam.spectrum.case {
        SpectrumCase::Distinct => affine_log_distinct(fam)?,
        SpectrumCase::Isotropic => isotropic_prediction(fam)?,
        SpectrumCase::Mixed => affine_log_general(fam),
    };
    let mean_prediction = *fam.mean.as_sym() + SymMatrix::from_dense(&affine_shift(fam));
    Ok(AffinePrediction {
        log_prediction,
        mean_prediction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDetPrediction {
    pub le: f64,
    pub aff: f64,
}

/// Predicted `log det` differences of both means against `Sbar`.
pub fn logdet_expansions(fam: &PerturbationFamily) -> Result<LogDetPrediction> {
    let le = expansion_log_euclidean(fam)?.trace();
    let spec = &fam.spectrum;
    let inv = fam.mean.inverse().into_sym().to_dense();
    let bsb = fam.second_moment(&inv);
    let aff = -0.5
        * spec
            .projections
            .iter()
            .zip(&spec.values)
            .map(|(p, l)| (p * bsb).trace() / l)
            .sum::<f64>();
    Ok(LogDetPrediction { le, aff })
}

// ---------------------------------------------------------------------------
// Order checks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    LogEuclideanLog,
    AffineLog,
    AffineMean,
    LogDetLe,
    LogDetAff,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::LogEuclideanLog,
        Check::AffineLog,
        Check::AffineMean,
        Check::LogDetLe,
        Check::LogDetAff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Check::LogEuclideanLog => "log_euclidean_log",
            Check::AffineLog => "affine_log",
            Check::AffineMean => "affine_mean",
            Check::LogDetLe => "logdet_log_euclidean",
            Check::LogDetAff => "logdet_affine",
        }
    }
}

/// Residuals of every prediction for one family.
pub fn residuals(fam: &PerturbationFamily) -> Result<[(Check, f64); 5]> {
    let le = fam.exact_log_euclidean()?;
    let aff = fam.exact_affine()?;
    let log_bar = fam.mean.log();
    let dle = le.log() - log_bar;
    let daff = aff.log() - log_bar;
    let p_le = expansion_log_euclidean(fam)?;
    let p_aff = expansion_affine(fam)?;
    let p_det = logdet_expansions(fam)?;
    Ok([
        (Check::LogEuclideanLog, (dle - p_le).frobenius_norm()),
        (Check::AffineLog, (daff - p_aff.log_prediction).frobenius_norm()),
        (Check::AffineMean, (*aff.as_sym() - p_aff.mean_prediction).frobenius_norm()),
        (Check::LogDetLe, (dle.trace() - p_det.le).abs()),
        (Check::LogDetAff, (daff.trace() - p_det.aff).abs()),
    ])
}

pub const ORDER_RATIO_RANGE: (f64, f64) = (6.0, 10.0);
pub const DEFAULT_T_GRID: [f64; 3] = [0.1, 0.05, 0.025];
pub const DEFAULT_FAMILY_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub proposition: Check,
    pub case: SpectrumCase,
    pub base: String,
    pub style: FamilyStyle,
    pub t: f64,
    pub residual: f64,
    /// `residual(t) / residual(t / 2)`.
    pub ratio_vs_half_t: f64,
    pub pass: bool,
}

/// Residuals at each `t` and `t / 2` for one base tensor and style.
pub fn order_check(
    base_name: &str,
    base: &SpdTensor,
    style: FamilyStyle,
    ts: &[f64],
    size: usize,
    rng: &RngSpec,
) -> Result<Vec<OrderRow>> {
    let shape = FamilyShape::draw(base, size, style, &mut rng.stream(0, 0))?;
    let mut rows = Vec::new();
    for &t in ts {
        let fam = shape.at(t)?;
        let full = residuals(&fam)?;
        let half = residuals(&shape.at(0.5 * t)?)?;
        for (k, (check, r)) in full.iter().enumerate() {
            let ratio = r / half[k].1;
            rows.push(OrderRow {
                proposition: *check,
                case: fam.spectrum.case,
                base: base_name.to_string(),
                style,
                t,
                residual: *r,
                ratio_vs_half_t: ratio,
                pass: ratio >= ORDER_RATIO_RANGE.0 && ratio <= ORDER_RATIO_RANGE.1,
            });
        }
    }
    Ok(rows)
}

/// The three reference bases.
pub fn default_bases() -> Vec<(String, SpdTensor)> {
    vec![
        ("identity".into(), SpdTensor::identity(3)),
        ("diag(3,2,1)".into(), SpdTensor::from_diag(&[3.0, 2.0, 1.0]).expect("SPD")),
        ("diag(0.25,16,0.25)".into(), SpdTensor::from_diag(&[0.25, 16.0, 0.25]).expect("SPD")),
    ]
}

/// Every base x style combination, in parallel; rows in grid order.
pub fn order_suite(ts: &[f64], size: usize, rng: &RngSpec) -> Result<Vec<OrderRow>> {
    let grid: Vec<(usize, String, SpdTensor, FamilyStyle)> = default_bases()
        .into_iter()
        .enumerate()
        .flat_map(|(i, (name, b))| FamilyStyle::ALL.into_iter().map(move |s| (i, name.clone(), b, s)))
        .collect();
    let blocks: Vec<Vec<OrderRow>> = grid
        .par_iter()
        .enumerate()
        .map(|(k, (_, name, b, s))| order_check(name, b, *s, ts, size, &rng.derive(k as u64)))
        .collect::<Result<_>>()?;
    Ok(blocks.into_iter().flatten().collect())
}
