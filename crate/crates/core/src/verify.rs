//! Verification suites: perturbation orders, small-noise regression
//! asymptotics and Rician information checks, reported as [`VerifyRow`]s.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::Result;
use crate::experiment::VerifyConfig;
use crate::io::VerifyRow;
use crate::karcher::WeightedEnsemble;
use crate::linalg::Mat;
use crate::noise::{default_scheme, rician_sample, GradientScheme};
use crate::perturbation::{default_bases, expansion_affine, expansion_log_euclidean, make_family, order_suite, FamilyStyle};
use crate::regression::{asymptotic_quantities, fit_linear, fit_mle, fit_nonlinear, FitReport};
use crate::rician::{dwi_signal_bias, fisher_matrix, scaled_fisher};
use crate::rng::RngSpec;
use crate::spd::{sym_eig, SpdTensor, SymMatrix};

pub const VARIANCE_TOL: f64 = 0.05;
pub const BIAS_TOL: f64 = 0.15;
pub const MLE_VARIANCE_TOL: f64 = 0.10;
pub const FISHER_LIMIT_TOL: f64 = 0.01;
pub const SATURATION_TOL: f64 = 1e-3;
pub const SIGNAL_BIAS_SE: f64 = 4.0;
pub const COMMUTING_TOL: f64 = 1e-11;
pub const ISOTROPIC_TOL: f64 = 1e-12;

pub const VARIANCE_SIGMA: f64 = 0.01;
pub const BIAS_SIGMA: f64 = 0.2;
pub const MLE_SIGMA: f64 = 0.05;
pub const FISHER_SIGMA: f64 = 1e-3;
pub const S0: f64 = 10.0;

const COMPONENTS: [&str; 6] = ["d11", "d22", "d33", "d12", "d13", "d23"];

/// Reference tensor for the Monte Carlo checks.
pub fn reference_tensor() -> SymMatrix {
    SymMatrix::from_diag(&[0.7, 2.0, 0.7])
}

fn row(proposition: &str, case: &str, base: &str, style: &str, t: f64, residual: f64, pass: bool) -> VerifyRow {
    VerifyRow {
        proposition: proposition.into(),
        case: case.into(),
        base: base.into(),
        style: style.into(),
        t,
        residual,
        ratio_vs_half_t: None,
        pass,
    }
}

// ---------------------------------------------------------------------------
// Perturbation expansions

/// Order checks over the default bases and both family styles, plus the
/// commuting and isotropic identities.
pub fn perturbation_suite(cfg: &VerifyConfig, rng: &RngSpec) -> Result<Vec<VerifyRow>> {
    let mut rows: Vec<VerifyRow> = order_suite(&cfg.t_grid, cfg.family_size, &rng.derive(1))?
        .iter()
        .map(VerifyRow::from)
        .collect();

    // Diagonal members commute, so both geometric means coincide.
    for (k, (name, base)) in default_bases().into_iter().enumerate() {
        let mut r = rng.derive(2).stream(k as u64, 0);
        let members: Vec<SpdTensor> = (0..cfg.family_size)
            .map(|_| {
                let d: Vec<f64> = (0..3).map(|i| base.as_sym().get(i, i) * r.random_range(0.5..2.0)).collect();
                SpdTensor::from_diag(&d)
            })
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = (0..members.len()).map(|_| r.random_range(0.1..1.0)).collect();
        let ens = WeightedEnsemble::new(members, weights)?;
        let le = ens.mean_log_euclidean()?;
        let aff = ens.mean_affine_recursive();
        let gap = (le.into_sym() - aff.into_sym()).frobenius_norm();
        rows.push(row("commuting_means", "diagonal", &name, "random", 0.0, gap, gap < COMMUTING_TOL));
    }

    // Isotropic base: both second-order predictions are the same matrix.
    let identity = SpdTensor::identity(3);
    for style in FamilyStyle::ALL {
        for (k, t) in cfg.t_grid.iter().enumerate() {
            let fam = make_family(&identity, *t, cfg.family_size, style, &rng.derive(3).derive(k as u64))?;
            let le = expansion_log_euclidean(&fam)?;
            let aff = expansion_affine(&fam)?.log_prediction;
            let gap = (le - aff).frobenius_norm();
            rows.push(row(
                "isotropic_predictions",
                "isotropic",
                "identity",
                style.name(),
                *t,
                gap,
                gap < ISOTROPIC_TOL,
            ));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Monte Carlo over Rician replicates

/// Component means and covariance of replicate estimates.
#[derive(Clone, Debug)]
pub struct Moments {
    pub n: usize,
    pub mean: [f64; 6],
    pub cov: Mat,
}

impl Moments {
    pub fn from_samples(samples: &[[f64; 6]]) -> Moments {
        let n = samples.len();
        let mut mean = [0.0; 6];
        for s in samples {
            for k in 0..6 {
                mean[k] += s[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Mat::zeros(6);
        for s in samples {
            for i in 0..6 {
                for j in 0..6 {
                    cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        Moments {
            n,
            mean,
            cov: cov.scale(1.0 / (n as f64 - 1.0)),
        }
    }

    pub fn standard_error(&self, k: usize) -> f64 {
        (self.cov[(k, k)] / self.n as f64).sqrt()
    }
}

/// Fit `replicates` independent Rician draws of the noiseless signals of
/// `d0`; replicate `r` uses stream `r`.
pub fn monte_carlo(
    d0: &SymMatrix,
    scheme: &GradientScheme,
    sigma: f64,
    replicates: usize,
    rng: &RngSpec,
    fit: impl Fn(&[f64]) -> Result<FitReport> + Sync,
) -> Result<Moments> {
    let clean = scheme.signals(d0, S0);
    let samples: Vec<[f64; 6]> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut g = rng.stream(r as u64, 0);
            let noisy: Vec<f64> = clean.iter().map(|s| rician_sample(*s, sigma, &mut g)).collect();
            Ok(fit(&noisy)?.estimate.to_tensor_vec())
        })
        .collect::<Result<_>>()?;
    Ok(Moments::from_samples(&samples))
}

/// Monte Carlo estimate of `E[D_NL] - d0` with the first-order term as a
/// control variate. Each replicate contributes
///
/// ```text
/// (D_NL - d0) + W^{-1} sum_b S_b x_b (S_obs - S_b - m_b)
/// ```
///
/// where `m_b` is the exact Rician mean shift of measurement `b`, so the
/// added term has mean zero and cancels the O(sigma) fluctuation.
pub fn controlled_bias(
    d0: &SymMatrix,
    scheme: &GradientScheme,
    sigma: f64,
    replicates: usize,
    rng: &RngSpec,
) -> Result<Moments> {
    let clean = scheme.signals(d0, S0);
    let shift: Vec<f64> = clean.iter().map(|s| dwi_signal_bias(*s, sigma)).collect();
    let w_inv = asymptotic_quantities(d0, scheme, S0)?.var_nl;
    let dv = d0.to_tensor_vec();
    let samples: Vec<[f64; 6]> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut g = rng.stream(r as u64, 0);
            let noisy: Vec<f64> = clean.iter().map(|s| rician_sample(*s, sigma, &mut g)).collect();
            let est = fit_nonlinear(&noisy, scheme, S0)?.estimate.to_tensor_vec();
            let mut score = [0.0; 6];
            for (((x, s), obs), m) in scheme.design().iter().zip(&clean).zip(&noisy).zip(&shift) {
                let e = s * (obs - s - m);
                for k in 0..6 {
                    score[k] += e * x[k];
                }
            }
            let ctl = w_inv.mul_vec(&score);
            Ok(std::array::from_fn(|k| est[k] - dv[k] + ctl[k]))
        })
        .collect::<Result<_>>()?;
    Ok(Moments::from_samples(&samples))
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn random_spd<R: Rng>(rng: &mut R) -> SymMatrix {
    let a = Mat::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
    SymMatrix::from_dense(&(a * a.transpose())) + SymMatrix::identity(3).scale(0.1)
}

pub fn regression_suite(cfg: &VerifyConfig, rng: &RngSpec) -> Result<Vec<VerifyRow>> {
    let scheme = default_scheme(2)?;
    let d0 = reference_tensor();
    let base = "diag(0.7,2,0.7)";
    let asym = asymptotic_quantities(&d0, &scheme, S0)?;
    let mut rows = Vec::new();

    let s2 = VARIANCE_SIGMA * VARIANCE_SIGMA;
    let ls = monte_carlo(&d0, &scheme, VARIANCE_SIGMA, cfg.replicates, &rng.derive(10), |s| {
        fit_linear(s, &scheme, S0)
    })?;
    let nl = monte_carlo(&d0, &scheme, VARIANCE_SIGMA, cfg.replicates, &rng.derive(11), |s| {
        fit_nonlinear(s, &scheme, S0)
    })?;
    for k in 0..3 {
        let e = relative(ls.cov[(k, k)] / s2, asym.var_ls[(k, k)]);
        rows.push(row("ls_variance", COMPONENTS[k], base, "monte_carlo", VARIANCE_SIGMA, e, e <= VARIANCE_TOL));
        let e = relative(nl.cov[(k, k)] / s2, asym.var_nl[(k, k)]);
        rows.push(row("nl_variance", COMPONENTS[k], base, "monte_carlo", VARIANCE_SIGMA, e, e <= VARIANCE_TOL));
    }

    let s2 = BIAS_SIGMA * BIAS_SIGMA;
    let bias = controlled_bias(&d0, &scheme, BIAS_SIGMA, cfg.bias_replicates, &rng.derive(12))?;
    for k in 0..6 {
        let b = bias.mean[k];
        // Only components the sample resolves are compared.
        if b.abs() <= 3.0 * bias.standard_error(k) {
            continue;
        }
        let e = relative(b / s2, asym.bias2_nl[k]);
        rows.push(row("nl_bias", COMPONENTS[k], base, "monte_carlo", BIAS_SIGMA, e, e <= BIAS_TOL));
    }

    let mut r = rng.derive(13).stream(0, 0);
    for i in 0..cfg.random_tensors {
        let d = random_spd(&mut r);
        let a = asymptotic_quantities(&d, &scheme, S0)?;
        let gap = SymMatrix::from_dense(&(a.var_ls - a.var_nl));
        let scale = a.var_ls.max_abs();
        let min = sym_eig(&gap)?.values().iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(row(
            "variance_ordering",
            &format!("tensor{i}"),
            "random",
            "closed_form",
            0.0,
            min / scale,
            min >= -1e-10 * scale,
        ));
    }
    Ok(rows)
}

pub fn rician_suite(cfg: &VerifyConfig, rng: &RngSpec) -> Result<Vec<VerifyRow>> {
    let scheme = default_scheme(2)?;
    let d0 = reference_tensor();
    let base = "diag(0.7,2,0.7)";
    let mut rows = Vec::new();

    // sigma^2 times the information tends to sum S_b^2 x x^T.
    let limit = scheme
        .design()
        .iter()
        .zip(scheme.signals(&d0, S0))
        .fold(Mat::zeros(6), |acc, (x, s)| acc + Mat::outer(x, x).scale(s * s));
    let f = fisher_matrix(&d0, &scheme, S0, FISHER_SIGMA)?.scale(FISHER_SIGMA * FISHER_SIGMA);
    let e = (f - limit).frobenius_norm() / limit.frobenius_norm();
    rows.push(row("fisher_limit", "frobenius", base, "quadrature", FISHER_SIGMA, e, e <= FISHER_LIMIT_TOL));

    for w in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        let j = scaled_fisher(w)?;
        rows.push(row("fisher_range", &format!("w={w}"), "-", "quadrature", w, j, j > 0.0 && j < 1.0));
    }
    let gap = 1.0 - scaled_fisher(50.0)?;
    rows.push(row("fisher_saturation", "w=50", "-", "quadrature", 50.0, gap, gap.abs() <= SATURATION_TOL));

    let asym = asymptotic_quantities(&d0, &scheme, S0)?;
    let ml = monte_carlo(&d0, &scheme, MLE_SIGMA, cfg.mle_replicates, &rng.derive(20), |s| {
        fit_mle(s, &scheme, S0, MLE_SIGMA)
    })?;
    for k in 0..3 {
        let e = relative(ml.cov[(k, k)] / (MLE_SIGMA * MLE_SIGMA), asym.var_nl[(k, k)]);
        rows.push(row("mle_variance", COMPONENTS[k], base, "monte_carlo", MLE_SIGMA, e, e <= MLE_VARIANCE_TOL));
    }

    for (k, snr) in signal_bias_grid().into_iter().enumerate() {
        let (z, _) = signal_bias_check(snr, 1.0, cfg.signal_bias_draws, &rng.derive(21).derive(k as u64));
        rows.push(row(
            "signal_bias",
            &format!("snr={snr:.6}"),
            "-",
            "monte_carlo",
            snr,
            z,
            z.abs() <= SIGNAL_BIAS_SE,
        ));
    }
    Ok(rows)
}

/// `S_bar / sigma` points: the Rayleigh endpoint `sqrt(pi/2)` and four more.
pub fn signal_bias_grid() -> [f64; 5] {
    [(std::f64::consts::PI / 2.0).sqrt(), 0.5, 2.0, 5.0, 20.0]
}

/// Standardized gap `(mc_bias - predicted) / se` and the Monte Carlo bias.
pub fn signal_bias_check(s_bar: f64, sigma: f64, draws: usize, rng: &RngSpec) -> (f64, f64) {
    const CHUNK: usize = 10_000;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = rng.stream(c as u64, 0);
            let n = CHUNK.min(draws - c * CHUNK);
            let mut acc = (0.0, 0.0);
            for _ in 0..n {
                let d = rician_sample(s_bar, sigma, &mut g) - s_bar;
                acc.0 += d;
                acc.1 += d * d;
            }
            acc
        })
        .collect();
    let (s, ss) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = draws as f64;
    let mean = s / n;
    let var = (ss - n * mean * mean) / (n - 1.0);
    let se = (var / n).sqrt();
    ((mean - dwi_signal_bias(s_bar, sigma)) / se, mean)
}

/// All suites in a fixed order.
pub fn full_suite(cfg: &VerifyConfig, rng: &RngSpec) -> Result<Vec<VerifyRow>> {
    let mut rows = perturbation_suite(cfg, &rng.derive(100))?;
    rows.extend(regression_suite(cfg, &rng.derive(200))?);
    rows.extend(rician_suite(cfg, &rng.derive(300))?);
    Ok(rows)
}
