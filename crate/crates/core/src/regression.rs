//! Tensor estimation from DWI signals.
//!
//! With `y_b = log(S_b / s0)` and design rows `x_b`:
//!
//! ```text
//! linear      D = -(sum x x^T)^{-1} sum y_b x_b
//! nonlinear   argmin_D sum_b (S_b - s0 exp(-x_b . D))^2
//! mle         argmax_D sum_b log p_rice(S_b; s0 exp(-x_b . D), sigma)
//! ```
//!
//! Estimates are unconstrained symmetric matrices. Indefinite estimates
//! are flagged and, when asked, projected by flooring eigenvalues at
//! `1e-6 * trace / 3`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, MAX_DIM};
use crate::noise::{DwiVolume, GradientScheme};
use crate::phantom::TensorField;
use crate::rician::{bessel_ratio, dot6, expected_log_noise_power, one_minus_bessel_ratio, rician_logpdf};
use crate::spd::{project_spd, SpdTensor, SymMatrix};

/// Signals below `SIGNAL_FLOOR * s0` are clamped before taking logs.
pub const SIGNAL_FLOOR: f64 = 1e-12;
/// Relative eigenvalue floor used when projecting indefinite estimates.
pub const PROJECTION_FLOOR: f64 = 1e-6;
const MIN_PROJECTION_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Linear,
    Nonlinear,
    Mle,
}

impl FitMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FitMethod::Linear => "linear",
            FitMethod::Nonlinear => "nonlinear",
            FitMethod::Mle => "mle",
        }
    }
}

impl std::str::FromStr for FitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FitMethod::Linear),
            "nonlinear" => Ok(FitMethod::Nonlinear),
            "mle" => Ok(FitMethod::Mle),
            other => Err(Error::InvalidInput(format!("unknown fit method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    /// Normal-equation (or score) tolerance relative to `s0^2`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Attach an SPD projection to indefinite estimates.
    pub project: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-10,
            max_iter: 200,
            max_halvings: 50,
            project: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitReport {
    pub estimate: SymMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// Final normal-equation (or score) norm, or the log-residual norm
    /// for the linear fit.
    pub residual: f64,
    pub spd: bool,
    pub projected: Option<SpdTensor>,
    pub clamped: usize,
}

impl FitReport {
    /// The estimate if SPD, else its projection (computed on demand).
    pub fn spd_estimate(&self) -> Result<SpdTensor> {
        if let Some(p) = self.projected {
            return Ok(p);
        }
        match SpdTensor::new(self.estimate) {
            Ok(t) => Ok(t),
            Err(_) => project(&self.estimate),
        }
    }
}

/// Floor eigenvalues at `1e-6 * trace / 3` (never below `1e-10`).
pub fn project(estimate: &SymMatrix) -> Result<SpdTensor> {
    let floor = (PROJECTION_FLOOR * estimate.trace() / 3.0).max(MIN_PROJECTION_FLOOR);
    project_spd(estimate, floor)
}

fn finish(estimate: [f64; 6], converged: bool, iterations: usize, residual: f64, clamped: usize, opts: &FitOptions) -> Result<FitReport> {
    let est = SymMatrix::from_tensor_vec(&estimate);
    if !est.is_finite() {
        return Err(Error::NonFinite);
    }
    let spd = SpdTensor::new(est).is_ok();
    let projected = if !spd && opts.project { Some(project(&est)?) } else { None };
    Ok(FitReport {
        estimate: est,
        converged,
        iterations,
        residual,
        spd,
        projected,
        clamped,
    })
}

fn check_signals(signals: &[f64], scheme: &GradientScheme, s0: f64) -> Result<()> {
    if signals.len() != scheme.n_measurements() {
        return Err(Error::DimensionMismatch {
            left: scheme.n_measurements(),
            right: signals.len(),
        });
    }
    if !(s0.is_finite() && s0 > 0.0) {
        return Err(Error::OutOfRange {
            name: "s0",
            value: s0,
            expected: "s0 > 0",
        });
    }
    if signals.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput("signals must be finite and non-negative".into()));
    }
    Ok(())
}

fn to6(v: [f64; MAX_DIM]) -> [f64; 6] {
    v
}

fn norm6(v: &[f64; 6]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least squares on log signals.
pub fn fit_linear(signals: &[f64], scheme: &GradientScheme, s0: f64) -> Result<FitReport> {
    fit_linear_with(signals, scheme, s0, &FitOptions::default())
}

pub fn fit_linear_with(signals: &[f64], scheme: &GradientScheme, s0: f64, opts: &FitOptions) -> Result<FitReport> {
    check_signals(signals, scheme, s0)?;
    let floor = SIGNAL_FLOOR * s0;
    let mut clamped = 0;
    let mut rhs = [0.0; 6];
    let mut ys = Vec::with_capacity(signals.len());
    for (x, s) in scheme.design().iter().zip(signals) {
        let s = if *s < floor {
            clamped += 1;
            floor
        } else {
            *s
        };
        let y = (s / s0).ln();
        ys.push(y);
        for k in 0..6 {
            rhs[k] -= y * x[k];
        }
    }
    let d = to6(scheme.gram().solve_spd(&rhs)?);
    let residual = scheme
        .design()
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y + dot6(x, &d)).powi(2))
        .sum::<f64>()
        .sqrt();
    finish(d, true, 0, residual, clamped, opts)
}

/// Solve `a x = b`, adding Levenberg damping if `a` is numerically singular.
fn solve_damped(a: &Mat, b: &[f64; 6]) -> Result<[f64; 6]> {
    if let Ok(x) = a.solve_spd(b) {
        return Ok(to6(x));
    }
    let scale = (0..6).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut mu = 1e-12;
    while mu < 1e6 {
        let damped = *a + Mat::identity(6).scale(mu * scale);
        if let Ok(x) = damped.solve_spd(b) {
            return Ok(to6(x));
        }
        mu *= 10.0;
    }
    Err(Error::IllConditioned(f64::INFINITY))
}

struct NlState {
    objective: f64,
    gradient: [f64; 6],
    normal: Mat,
}

fn nl_state(d: &[f64; 6], signals: &[f64], scheme: &GradientScheme, s0: f64) -> NlState {
    let mut objective = 0.0;
    let mut gradient = [0.0; 6];
    let mut normal = Mat::zeros(6);
    for (x, s) in scheme.design().iter().zip(signals) {
        let m = s0 * (-dot6(x, d)).exp();
        let r = s - m;
        objective += r * r;
        for i in 0..6 {
            gradient[i] += r * m * x[i];
            for j in 0..6 {
                normal[(i, j)] += m * m * x[i] * x[j];
            }
        }
    }
    NlState {
        objective,
        gradient,
        normal,
    }
}

fn nl_objective(d: &[f64; 6], signals: &[f64], scheme: &GradientScheme, s0: f64) -> f64 {
    scheme
        .design()
        .iter()
        .zip(signals)
        .map(|(x, s)| (s - s0 * (-dot6(x, d)).exp()).powi(2))
        .sum()
}

/// Gauss-Newton on the signal residuals with step halving, started at the
/// linear estimate. Converged when `|sum_b r_b m_b x_b| < tol * s0^2`.
pub fn fit_nonlinear(signals: &[f64], scheme: &GradientScheme, s0: f64) -> Result<FitReport> {
    fit_nonlinear_with(signals, scheme, s0, &FitOptions::default())
}

pub fn fit_nonlinear_with(signals: &[f64], scheme: &GradientScheme, s0: f64, opts: &FitOptions) -> Result<FitReport> {
    let init = fit_linear_with(signals, scheme, s0, opts)?;
    let mut d = init.estimate.to_tensor_vec();
    let scale = s0 * s0;
    let mut state = nl_state(&d, signals, scheme, s0);
    let mut residual = norm6(&state.gradient);
    for iter in 0..opts.max_iter {
        if residual < opts.tol * scale {
            return finish(d, true, iter, residual, init.clamped, opts);
        }
        let neg: [f64; 6] = std::array::from_fn(|k| -state.gradient[k]);
        let step = solve_damped(&state.normal, &neg)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: [f64; 6] = std::array::from_fn(|k| d[k] + alpha * step[k]);
            let q = nl_objective(&trial, signals, scheme, s0);
            if q.is_finite() && q < state.objective {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(trial) => {
                d = trial;
                state = nl_state(&d, signals, scheme, s0);
                residual = norm6(&state.gradient);
            }
            // No descent left: we are at the optimum up to rounding, or stuck.
            None => {
                let converged = residual < opts.tol.sqrt() * scale;
                return finish(d, converged, iter + 1, residual, init.clamped, opts);
            }
        }
    }
    let converged = residual < opts.tol * scale;
    finish(d, converged, opts.max_iter, residual, init.clamped, opts)
}

fn mle_loglik(d: &[f64; 6], signals: &[f64], scheme: &GradientScheme, s0: f64, sigma: f64) -> f64 {
    scheme
        .design()
        .iter()
        .zip(signals)
        .map(|(x, s)| rician_logpdf(*s, s0 * (-dot6(x, d)).exp(), sigma))
        .sum()
}

/// Damped Newton ascent of the Rician log-likelihood, started at the
/// nonlinear least-squares estimate. Falls back to the high-SNR Fisher
/// matrix `sum zeta^2 / sigma^2 x x^T` where the Hessian is not negative
/// definite. Converged when `sigma^2 |score| / s0^2 < tol`.
pub fn fit_mle(signals: &[f64], scheme: &GradientScheme, s0: f64, sigma: f64) -> Result<FitReport> {
    fit_mle_with(signals, scheme, s0, sigma, &FitOptions::default())
}

pub fn fit_mle_with(signals: &[f64], scheme: &GradientScheme, s0: f64, sigma: f64, opts: &FitOptions) -> Result<FitReport> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::OutOfRange {
            name: "sigma",
            value: sigma,
            expected: "sigma > 0",
        });
    }
    let init = fit_nonlinear_with(signals, scheme, s0, opts)?;
    let mut d = init.estimate.to_tensor_vec();
    let s2 = sigma * sigma;
    let mut ll = mle_loglik(&d, signals, scheme, s0, sigma);
    let mut residual = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let mut score = [0.0; 6];
        let mut neg_hess = Mat::zeros(6);
        let mut fisher = Mat::zeros(6);
        for (x, s) in scheme.design().iter().zip(signals) {
            let zeta = s0 * (-dot6(x, &d)).exp();
            let t = s * zeta / s2;
            let f = bessel_ratio(t);
            // dl/dzeta and d2l/dzeta2
            let g = (-zeta + s * f) / s2;
            let omf = one_minus_bessel_ratio(t);
            let fprime = if t == 0.0 { 0.5 } else { omf * (2.0 - omf) - f / t };
            let h = -1.0 / s2 + (s / s2).powi(2) * fprime;
            let curv = -(h * zeta * zeta + g * zeta);
            let info = zeta * zeta / s2;
            for i in 0..6 {
                score[i] -= g * zeta * x[i];
                for j in 0..6 {
                    neg_hess[(i, j)] += curv * x[i] * x[j];
                    fisher[(i, j)] += info * x[i] * x[j];
                }
            }
        }
        residual = norm6(&score) * s2 / (s0 * s0);
        if residual < opts.tol {
            return finish(d, true, iter, residual, init.clamped, opts);
        }
        let step = match neg_hess.solve_spd(&score) {
            Ok(x) => to6(x),
            Err(_) => solve_damped(&fisher, &score)?,
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: [f64; 6] = std::array::from_fn(|k| d[k] + alpha * step[k]);
            let l = mle_loglik(&trial, signals, scheme, s0, sigma);
            if l.is_finite() && l > ll {
                d = trial;
                ll = l;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let converged = residual < opts.tol.sqrt();
            return finish(d, converged, iter + 1, residual, init.clamped, opts);
        }
    }
    finish(d, false, opts.max_iter, residual, init.clamped, opts)
}

// ---------------------------------------------------------------------------
// Whole volumes

#[derive(Clone, Debug)]
pub struct FittedVolume {
    pub method: FitMethod,
    pub reports: Vec<FitReport>,
    pub field: TensorField,
}

impl FittedVolume {
    pub fn non_converged(&self) -> usize {
        self.reports.iter().filter(|r| !r.converged).count()
    }

    pub fn non_spd(&self) -> usize {
        self.reports.iter().filter(|r| !r.spd).count()
    }

    pub fn clamped(&self) -> usize {
        self.reports.iter().map(|r| r.clamped).sum()
    }

    /// Raw estimates with indefinite voxels replaced by their projection.
    pub fn projected_field(&self) -> Result<TensorField> {
        let values = self
            .reports
            .iter()
            .map(|r| r.spd_estimate().map(|t| t.into_sym()))
            .collect::<Result<_>>()?;
        TensorField::new(self.field.grid, values)
    }
}

/// Fit every voxel. Fails if more than `max_failure_fraction` of the voxels
/// do not converge.
pub fn fit_volume(
    volume: &DwiVolume,
    scheme: &GradientScheme,
    method: FitMethod,
    sigma: Option<f64>,
    opts: &FitOptions,
    max_failure_fraction: f64,
) -> Result<FittedVolume> {
    if volume.n_measurements != scheme.n_measurements() {
        return Err(Error::DimensionMismatch {
            left: scheme.n_measurements(),
            right: volume.n_measurements,
        });
    }
    let sigma = match (method, sigma) {
        (FitMethod::Mle, None) => {
            return Err(Error::InvalidInput("the Rician MLE needs the noise level".into()));
        }
        (_, s) => s.unwrap_or(1.0),
    };
    let reports: Vec<FitReport> = (0..volume.grid.len())
        .into_par_iter()
        .map(|i| {
            let s = volume.voxel(i);
            match method {
                FitMethod::Linear => fit_linear_with(s, scheme, volume.s0, opts),
                FitMethod::Nonlinear => fit_nonlinear_with(s, scheme, volume.s0, opts),
                FitMethod::Mle => fit_mle_with(s, scheme, volume.s0, sigma, opts),
            }
        })
        .collect::<Result<_>>()?;
    let failed = reports.iter().filter(|r| !r.converged).count();
    if failed as f64 > max_failure_fraction * reports.len() as f64 {
        return Err(Error::FitFailures {
            failed,
            total: reports.len(),
            limit: max_failure_fraction,
        });
    }
    let field = TensorField::new(volume.grid, reports.iter().map(|r| r.estimate).collect())?;
    Ok(FittedVolume {
        method,
        reports,
        field,
    })
}

// ---------------------------------------------------------------------------
// Small-noise asymptotics

#[derive(Clone, Copy, Debug)]
pub struct AsymptoticQuantities {
    /// Leading covariance of the linear estimate divided by `sigma^2`.
    pub var_ls: Mat,
    /// Leading covariance of the nonlinear estimate divided by `sigma^2`.
    pub var_nl: Mat,
    /// Leading bias of the nonlinear estimate divided by `sigma^2`.
    pub bias2_nl: [f64; 6],
}

/// With `W = sum S_b^2 x x^T` and `A = sum x x^T`:
///
/// ```text
/// var_ls   = A^{-1} (sum S_b^{-2} x x^T) A^{-1}
/// var_nl   = W^{-1}
/// bias2_nl = -1/2 W^{-1} sum_b (1 - S_b^2 x_b^T W^{-1} x_b) x_b
/// ```
pub fn asymptotic_quantities(d0: &SymMatrix, scheme: &GradientScheme, s0: f64) -> Result<AsymptoticQuantities> {
    let signals = scheme.signals(d0, s0);
    let mut middle = Mat::zeros(6);
    let mut w = Mat::zeros(6);
    for (x, s) in scheme.design().iter().zip(&signals) {
        let xx = Mat::outer(x, x);
        middle = middle + xx.scale(1.0 / (s * s));
        w = w + xx.scale(s * s);
    }
    let a_inv = scheme.gram().inverse_spd()?;
    let var_ls = (a_inv * middle) * a_inv;
    let var_nl = w.inverse_spd()?;
    let mut acc = [0.0; 6];
    for (x, s) in scheme.design().iter().zip(&signals) {
        let wx = var_nl.mul_vec(x);
        let lev = dot6(x, &to6(wx));
        for k in 0..6 {
            acc[k] += (1.0 - s * s * lev) * x[k];
        }
    }
    let b = var_nl.mul_vec(&acc);
    Ok(AsymptoticQuantities {
        var_ls: SymMatrix::from_dense(&var_ls).to_dense(),
        var_nl,
        bias2_nl: std::array::from_fn(|k| -0.5 * b[k]),
    })
}

/// Leading low-SNR bias of the linear estimate. Measurements with
/// `S_b < cut * sigma` form the uninformative set `U`:
///
/// ```text
/// A^{-1} [ -(sum_U x x^T) D0 + sum_U (log(s0/sigma) - E log(Q + S_b^2/sigma^2) / 2) x_b ]
/// ```
///
/// with `Q` exponential of mean 2.
pub fn low_snr_ls_bias(d0: &SymMatrix, scheme: &GradientScheme, s0: f64, sigma: f64, cut: f64) -> Result<[f64; 6]> {
    if !(sigma > 0.0) {
        return Err(Error::OutOfRange {
            name: "sigma",
            value: sigma,
            expected: "sigma > 0",
        });
    }
    let signals = scheme.signals(d0, s0);
    let dv = d0.to_tensor_vec();
    let log_ratio = (s0 / sigma).ln();
    let mut acc = [0.0; 6];
    for (x, s) in scheme.design().iter().zip(&signals) {
        if *s >= cut * sigma {
            continue;
        }
        let xd = dot6(x, &dv);
        let shift = log_ratio - 0.5 * expected_log_noise_power((s / sigma).powi(2))?;
        for k in 0..6 {
            acc[k] += -x[k] * xd + shift * x[k];
        }
    }
    Ok(to6(scheme.gram().solve_spd(&acc)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{default_scheme, rician_sample};
    use crate::rng::RngSpec;
    use approx::assert_relative_eq;

    fn d0() -> SymMatrix {
        SymMatrix::from_tensor_vec(&[0.7, 2.0, 0.7, 0.1, -0.05, 0.2])
    }

    #[test]
    fn noiseless_signals_are_recovered_exactly() {
        let s = default_scheme(2).unwrap();
        let sig = s.signals(&d0(), 10.0);
        for fit in [
            fit_linear(&sig, &s, 10.0).unwrap(),
            fit_nonlinear(&sig, &s, 10.0).unwrap(),
        ] {
            assert!((fit.estimate - d0()).frobenius_norm() < 1e-12);
            assert!(fit.converged && fit.spd);
        }
    }

    #[test]
    fn linear_fit_clamps_zero_signals() {
        let s = default_scheme(1).unwrap();
        let mut sig = s.signals(&d0(), 10.0);
        sig[0] = 0.0;
        let fit = fit_linear(&sig, &s, 10.0).unwrap();
        assert_eq!(fit.clamped, 1);
        assert!(fit.estimate.is_finite());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let s = default_scheme(1).unwrap();
        assert!(fit_linear(&[1.0; 8], &s, 10.0).is_err());
        assert!(fit_linear(&[f64::NAN; 9], &s, 10.0).is_err());
        assert!(fit_mle(&[1.0; 9], &s, 10.0, 0.0).is_err());
    }

    #[test]
    fn indefinite_estimates_are_projected() {
        let s = default_scheme(1).unwrap();
        let neg = SymMatrix::from_diag(&[1.0, 1.0, -0.2]);
        let sig = s.signals(&neg, 10.0);
        let fit = fit_linear(&sig, &s, 10.0).unwrap();
        assert!(!fit.spd);
        let p = fit.projected.unwrap();
        let floor = 1e-6 * fit.estimate.trace() / 3.0;
        assert_relative_eq!(p.eig().values()[2], floor, max_relative = 1e-9);
    }

    #[test]
    fn rotation_equivariance() {
        let (sn, c) = 0.7f64.sin_cos();
        let r = Mat::from_rows(&[&[c, -sn, 0.0], &[sn, c, 0.0], &[0.0, 0.0, 1.0]]);
        let base = default_scheme(1).unwrap();
        let rotated: Vec<[f64; 3]> = base
            .directions()
            .iter()
            .map(|b| {
                let v = r.mul_vec(&[b[0], b[1], b[2]]);
                [v[0], v[1], v[2]]
            })
            .collect();
        let rs = GradientScheme::new(&rotated, 1).unwrap();
        // Same noisy signals measured along rotated directions.
        let mut sig = base.signals(&d0(), 10.0);
        for (k, v) in sig.iter_mut().enumerate() {
            *v *= 1.0 + 0.01 * ((k as f64) * 1.3).sin();
        }
        for method in [FitMethod::Linear, FitMethod::Nonlinear] {
            let (a, b) = match method {
                FitMethod::Linear => (fit_linear(&sig, &base, 10.0).unwrap(), fit_linear(&sig, &rs, 10.0).unwrap()),
                _ => (fit_nonlinear(&sig, &base, 10.0).unwrap(), fit_nonlinear(&sig, &rs, 10.0).unwrap()),
            };
            let expect = SymMatrix::from_dense(&((r * a.estimate.to_dense()) * r.transpose()));
            assert!((expect - b.estimate).frobenius_norm() < 1e-7, "{method:?}");
        }
    }

    #[test]
    fn permutation_invariance() {
        let s = default_scheme(1).unwrap();
        let sig: Vec<f64> = s.signals(&d0(), 10.0).iter().enumerate().map(|(k, v)| v * (1.0 + 0.02 * (k as f64).cos())).collect();
        let perm = [8, 3, 5, 0, 1, 7, 2, 6, 4];
        let dirs: Vec<[f64; 3]> = perm.iter().map(|&k| s.directions()[k]).collect();
        let ps = GradientScheme::new(&dirs, 1).unwrap();
        let psig: Vec<f64> = perm.iter().map(|&k| sig[k]).collect();
        let a = fit_nonlinear(&sig, &s, 10.0).unwrap();
        let b = fit_nonlinear(&psig, &ps, 10.0).unwrap();
        assert!((a.estimate - b.estimate).frobenius_norm() < 1e-10);
    }

    #[test]
    fn nonlinear_satisfies_normal_equations() {
        let s = default_scheme(2).unwrap();
        let spec = RngSpec::new(11);
        let clean = s.signals(&d0(), 10.0);
        let sig: Vec<f64> = clean.iter().enumerate().map(|(k, v)| rician_sample(*v, 0.3, &mut spec.stream(0, k as u64))).collect();
        let fit = fit_nonlinear(&sig, &s, 10.0).unwrap();
        assert!(fit.converged);
        assert!(fit.residual < 1e-10 * 100.0);
        // The nonlinear estimate has a smaller signal-space residual than the linear one.
        let lin = fit_linear(&sig, &s, 10.0).unwrap();
        let q = |d: &SymMatrix| nl_objective(&d.to_tensor_vec(), &sig, &s, 10.0);
        assert!(q(&fit.estimate) <= q(&lin.estimate));
    }

    #[test]
    fn mle_is_close_to_nonlinear_at_high_snr() {
        let s = default_scheme(2).unwrap();
        let sigma = 0.01;
        let spec = RngSpec::new(12);
        let clean = s.signals(&d0(), 10.0);
        for r in 0..100 {
            let mut g = spec.stream(r, 0);
            let sig: Vec<f64> = clean.iter().map(|v| rician_sample(*v, sigma, &mut g)).collect();
            let nl = fit_nonlinear(&sig, &s, 10.0).unwrap();
            let ml = fit_mle(&sig, &s, 10.0, sigma).unwrap();
            assert!(ml.converged);
            assert!((ml.estimate - nl.estimate).frobenius_norm() < 10.0 * sigma * sigma, "replicate {r}");
        }
    }

    #[test]
    fn asymptotic_variances_are_ordered() {
        // var_ls - var_nl is positive semidefinite (Gauss-Markov on the
        // weighted problem).
        let s = default_scheme(2).unwrap();
        let q = asymptotic_quantities(&d0(), &s, 10.0).unwrap();
        let diff = SymMatrix::from_dense(&(q.var_ls - q.var_nl));
        assert!(diff.eig().unwrap().values()[5] > -1e-12 * q.var_ls.max_abs());
        // Equal signals: both coincide.
        let iso = asymptotic_quantities(&SymMatrix::identity(3), &s, 10.0).unwrap();
        assert!((iso.var_ls - iso.var_nl).max_abs() < 1e-12 * iso.var_ls.max_abs());
    }

    #[test]
    fn low_snr_bias_scaling() {
        let s = default_scheme(2).unwrap();
        let d = SymMatrix::from_diag(&[0.25, 16.0, 0.25]);
        let b1 = low_snr_ls_bias(&d, &s, 10.0, 1.0, 1.0).unwrap();
        // Scaling s0 and sigma together changes nothing.
        let b2 = low_snr_ls_bias(&d, &s, 20.0, 2.0, 1.0).unwrap();
        for k in 0..6 {
            assert_relative_eq!(b1[k], b2[k], epsilon = 1e-9);
        }
        // Empty uninformative set: no bias term.
        let b3 = low_snr_ls_bias(&SymMatrix::identity(3), &s, 10.0, 0.01, 1.0).unwrap();
        assert!(b3.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn low_snr_bias_log_ratio_shift() {
        // With every uninformative signal far below sigma, doubling s0 keeps
        // the set and shifts the bias by A^{-1} (sum_U x_b) log 2.
        let s = default_scheme(1).unwrap();
        let d = SymMatrix::from_diag(&[0.25, 40.0, 0.25]);
        let sigma = 1.0;
        let b1 = low_snr_ls_bias(&d, &s, 10.0, sigma, 1e-6).unwrap();
        let b2 = low_snr_ls_bias(&d, &s, 20.0, sigma, 1e-6).unwrap();
        let mut sum = [0.0; 6];
        for (x, sig) in s.design().iter().zip(s.signals(&d, 10.0)) {
            if sig < 1e-6 * sigma {
                for k in 0..6 {
                    sum[k] += x[k];
                }
            }
        }
        let shift = s.gram().solve_spd(&sum).unwrap();
        for k in 0..6 {
            assert!((b2[k] - b1[k] - shift[k] * 2f64.ln()).abs() < 1e-6, "component {k}");
        }
    }

    fn random_spd(seed: u64) -> SymMatrix {
        use rand::Rng;
        let mut g = RngSpec::new(seed).stream(0, 0);
        let a = SymMatrix::from_fn(3, |_, _| g.random_range(-1.0..1.0));
        let v = a.eig().unwrap();
        let lambda: [f64; 3] = std::array::from_fn(|_| g.random_range(0.1..16.0));
        SymMatrix::from_fn(3, |i, j| (0..3).map(|k| lambda[k] * v.vectors()[(i, k)] * v.vectors()[(j, k)]).sum())
    }

    #[test]
    fn zero_noise_consistency_on_random_tensors() {
        let s = default_scheme(2).unwrap();
        for seed in 0..50 {
            let d = random_spd(seed);
            let sig = s.signals(&d, 10.0);
            for fit in [fit_linear(&sig, &s, 10.0).unwrap(), fit_nonlinear(&sig, &s, 10.0).unwrap()] {
                assert!((fit.estimate - d).frobenius_norm() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn nonlinear_objective_never_increases() {
        let s = default_scheme(2).unwrap();
        let clean = s.signals(&d0(), 10.0);
        for seed in 0..5 {
            let spec = RngSpec::new(100 + seed);
            let sig: Vec<f64> = clean
                .iter()
                .enumerate()
                .map(|(k, v)| rician_sample(*v, 1.0, &mut spec.stream(0, k as u64)))
                .collect();
            let q = |iters| {
                let opts = FitOptions {
                    max_iter: iters,
                    ..FitOptions::default()
                };
                let d = fit_nonlinear_with(&sig, &s, 10.0, &opts).unwrap().estimate;
                nl_objective(&d.to_tensor_vec(), &sig, &s, 10.0)
            };
            let path: Vec<f64> = (0..12).map(q).collect();
            assert!(path.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {path:?}");
        }
    }

    #[test]
    fn mle_recovers_noiseless_tensor_at_tiny_sigma() {
        let s = default_scheme(2).unwrap();
        let sig = s.signals(&d0(), 10.0);
        let ml = fit_mle(&sig, &s, 10.0, 1e-4).unwrap();
        assert!((ml.estimate - d0()).frobenius_norm() < 1e-3);
    }

    #[test]
    fn anisotropy_inflates_linear_variance() {
        let s = default_scheme(2).unwrap();
        let d = SymMatrix::from_diag(&[0.25, 16.0, 0.25]);
        let q = asymptotic_quantities(&d, &s, 10.0).unwrap();
        let top = |m: &Mat| SymMatrix::from_dense(m).eig().unwrap().values()[0];
        assert!(top(&q.var_ls) > 10.0 * top(&q.var_nl));
    }

    #[test]
    fn bias_coefficients_are_negative() {
        // Each x_b enters the leading bias with -(1 - S_b^2 x_b^T W^{-1} x_b) / 2.
        let s = default_scheme(2).unwrap();
        for d in [d0(), SymMatrix::from_diag(&[0.25, 16.0, 0.25])] {
            let w_inv = asymptotic_quantities(&d, &s, 10.0).unwrap().var_nl;
            for (x, sig) in s.design().iter().zip(s.signals(&d, 10.0)) {
                let lev = sig * sig * dot6(x, &to6(w_inv.mul_vec(x)));
                assert!(lev > 0.0 && lev < 1.0, "{lev}");
            }
        }
    }

    #[test]
    fn low_snr_bias_sign_matches_monte_carlo() {
        let s = default_scheme(2).unwrap();
        let d = SymMatrix::from_diag(&[0.25, 16.0, 0.25]);
        let sigma = 1.0;
        let predicted = low_snr_ls_bias(&d, &s, 10.0, sigma, 1.0).unwrap();
        let clean = s.signals(&d, 10.0);
        let spec = RngSpec::new(21);
        let n = 100_000;
        let (mut sum, mut sq) = ([0.0; 6], [0.0; 6]);
        for r in 0..n {
            let mut g = spec.stream(r, 0);
            let sig: Vec<f64> = clean.iter().map(|v| rician_sample(*v, sigma, &mut g)).collect();
            let e = fit_linear(&sig, &s, 10.0).unwrap().estimate.to_tensor_vec();
            let dv = d.to_tensor_vec();
            for k in 0..6 {
                sum[k] += e[k] - dv[k];
                sq[k] += (e[k] - dv[k]).powi(2);
            }
        }
        let mut resolved = 0;
        for k in 0..6 {
            let mean = sum[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            if mean.abs() > 3.0 * se {
                resolved += 1;
                assert_eq!(mean.signum(), predicted[k].signum(), "component {k}: {mean} vs {}", predicted[k]);
            }
        }
        assert!(resolved >= 1);
    }
}
