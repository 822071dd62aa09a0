//! Rician likelihood machinery.
//!
//! A magnitude signal `S = |zeta (1, 0) + sigma eps|`, `eps ~ N(0, I_2)`,
//! has density
//!
//! ```text
//! p(x) = (x / sigma^2) exp(-(x^2 + zeta^2) / (2 sigma^2)) I0(x zeta / sigma^2)
//! ```
//!
//! Everything is evaluated through the exponentially scaled Bessel
//! functions `I0e(t) = exp(-t) I0(t)` and `I1e(t) = exp(-t) I1(t)`, which
//! stay finite for any argument.

use crate::error::Result;
use crate::linalg::Mat;
use crate::noise::GradientScheme;
use crate::quadrature::integrate;
use crate::spd::SymMatrix;

const SERIES_LIMIT: f64 = 20.0;

/// Scaled modified Bessel function `exp(-t) I0(t)` for `t >= 0`.
pub fn bessel_i0e(t: f64) -> f64 {
    let t = t.abs();
    if t <= SERIES_LIMIT {
        series(t, 0) * (-t).exp()
    } else {
        asymptotic(t, 0)
    }
}

/// Scaled modified Bessel function `exp(-t) I1(t)` for `t >= 0`.
pub fn bessel_i1e(t: f64) -> f64 {
    if t < 0.0 {
        return -bessel_i1e(-t);
    }
    if t <= SERIES_LIMIT {
        series(t, 1) * (-t).exp()
    } else {
        asymptotic(t, 1)
    }
}

/// Unscaled `I0(t)`; overflows to infinity past `t ~ 713`.
pub fn bessel_i0(t: f64) -> f64 {
    let t = t.abs();
    if t <= SERIES_LIMIT {
        series(t, 0)
    } else {
        asymptotic(t, 0) * t.exp()
    }
}

/// Unscaled `I1(t)`; overflows to infinity past `t ~ 713`.
pub fn bessel_i1(t: f64) -> f64 {
    if t < 0.0 {
        return -bessel_i1(-t);
    }
    if t <= SERIES_LIMIT {
        series(t, 1)
    } else {
        asymptotic(t, 1) * t.exp()
    }
}

/// `sum_k (t/2)^{2k+nu} / (k! (k+nu)!)`; all terms positive.
fn series(t: f64, nu: u32) -> f64 {
    let q = 0.25 * t * t;
    let mut term = if nu == 0 { 1.0 } else { 0.5 * t };
    let mut sum = term;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * (k + nu as f64));
        sum += term;
        k += 1.0;
    }
    sum
}

/// Terms of the large-argument expansion of `exp(-t) I_nu(t) sqrt(2 pi t)`.
fn asymptotic_terms(t: f64, nu: u32, mut visit: impl FnMut(usize, f64)) {
    let mu = 4.0 * (nu * nu) as f64;
    let mut term = 1.0;
    visit(0, term);
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (8.0 * k as f64 * t);
        if next.abs() >= term.abs() || next == 0.0 {
            break;
        }
        term = next;
        visit(k, term);
        if term.abs() < 1e-18 {
            break;
        }
    }
}

fn asymptotic(t: f64, nu: u32) -> f64 {
    let mut sum = 0.0;
    asymptotic_terms(t, nu, |_, term| sum += term);
    sum / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// `I1(t) / I0(t)`, with `F(0) = 0` and `F -> 1` as `t -> infinity`.
pub fn bessel_ratio(t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    bessel_i1e(t) / bessel_i0e(t)
}

/// `1 - I1(t)/I0(t)` without cancellation at large `t`.
pub fn one_minus_bessel_ratio(t: f64) -> f64 {
    let t = t.abs();
    if t <= SERIES_LIMIT {
        return 1.0 - bessel_ratio(t);
    }
    let mut i0 = Vec::with_capacity(32);
    let mut i1 = Vec::with_capacity(32);
    asymptotic_terms(t, 0, |_, x| i0.push(x));
    asymptotic_terms(t, 1, |_, x| i1.push(x));
    let n = i0.len().min(i1.len());
    let diff: f64 = (0..n).map(|k| i0[k] - i1[k]).sum();
    let den: f64 = i0.iter().sum();
    diff / den
}

/// Rician density at `x` for noiseless magnitude `zeta` and noise `sigma`.
pub fn rician_pdf(x: f64, zeta: f64, sigma: f64) -> f64 {
    rician_logpdf(x, zeta, sigma).exp()
}

pub fn rician_logpdf(x: f64, zeta: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let s2 = sigma * sigma;
    let u = x * zeta / s2;
    x.ln() - s2.ln() - (x - zeta).powi(2) / (2.0 * s2) + bessel_i0e(u).ln()
}

/// Scaled Fisher information `sigma^2 J(zeta)` as a function of
/// `w = zeta / sigma`. Uses `E[U^2] = w^2 + 2` for `U ~ Rice(w, 1)`:
///
/// ```text
/// sigma^2 J = E[U^2 F(U w)^2] - w^2 = 2 - E[U^2 (1 - F(U w)^2)]
/// ```
pub fn scaled_fisher(w: f64) -> Result<f64> {
    let w = w.abs();
    let integrand = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let t = u * w;
        let omf = one_minus_bessel_ratio(t);
        let one_minus_f2 = omf * (2.0 - omf);
        u * u * u * one_minus_f2 * bessel_i0e(t) * (-0.5 * (u - w) * (u - w)).exp()
    };
    let lo = (w - 12.0).max(0.0);
    let hi = w + 14.0;
    let r = integrate(integrand, lo, hi, 1e-14, 1e-13)?;
    Ok(2.0 - r.value)
}

/// Fisher information of one Rician measurement with respect to `zeta`.
pub fn fisher_scalar(zeta: f64, sigma: f64) -> Result<f64> {
    Ok(scaled_fisher(zeta / sigma)? / (sigma * sigma))
}

/// ```text
/// V(w) = int_0^inf u^3 I1(u w)^2 / I0(u w) exp(-u^2 / 2) du
/// ```
///
/// Grows like `exp(w^2 / 2)`, so it overflows for `w` beyond ~37; use
/// [`scaled_fisher`] for the information itself.
pub fn v_function(w: f64) -> Result<f64> {
    let w = w.abs();
    if w == 0.0 {
        return Ok(0.0);
    }
    if w >= 1.0 {
        let r = integrate(
            |u: f64| {
                let t = u * w;
                let i1 = bessel_i1e(t);
                u * u * u * i1 * i1 / bessel_i0e(t) * (-0.5 * (u - w) * (u - w)).exp()
            },
            (w - 12.0).max(0.0),
            w + 14.0,
            0.0,
            1e-13,
        )?;
        Ok(r.value * (0.5 * w * w).exp())
    } else {
        // v = u w: w^{-4} int v^3 I1(v)^2 / I0(v) exp(-v^2 / (2 w^2)) dv
        let r = integrate(
            |v: f64| {
                let i1 = bessel_i1e(v);
                v * v * v * i1 * i1 / bessel_i0e(v) * (v - v * v / (2.0 * w * w)).exp()
            },
            0.0,
            w * (w + 14.0),
            0.0,
            1e-13,
        )?;
        Ok(r.value / w.powi(4))
    }
}

/// `sum_b J(S_b) S_b^2 x_b x_b^T` for noiseless signals `S_b` of `d`.
pub fn fisher_matrix(d: &SymMatrix, scheme: &GradientScheme, s0: f64, sigma: f64) -> Result<Mat> {
    let mut m = Mat::zeros(6);
    for x in scheme.design() {
        let s = s0 * (-dot6(x, &d.to_tensor_vec())).exp();
        let j = fisher_scalar(s, sigma)?;
        m = m + Mat::outer(x, x).scale(j * s * s);
    }
    Ok(m)
}

/// `E[S] - S_bar` for a Rician magnitude:
///
/// ```text
/// E[S] = sqrt(pi/2) sigma L_{1/2}(-S_bar^2 / (2 sigma^2))
/// L_{1/2}(-a) = (1 + a) I0e(a/2) + a I1e(a/2)
/// ```
pub fn dwi_signal_bias(s_bar: f64, sigma: f64) -> f64 {
    let a = s_bar * s_bar / (2.0 * sigma * sigma);
    let laguerre = (1.0 + a) * bessel_i0e(0.5 * a) + a * bessel_i1e(0.5 * a);
    (std::f64::consts::PI / 2.0).sqrt() * sigma * laguerre - s_bar
}

/// `E log(Q + a)` for `Q` exponential with mean 2 (squared norm of a
/// standard bivariate normal).
pub fn expected_log_noise_power(a: f64) -> Result<f64> {
    let r = integrate(|u: f64| (2.0 * u + a).ln() * (-u).exp(), 0.0, 60.0, 1e-14, 1e-13)?;
    Ok(r.value)
}

#[inline]
pub(crate) fn dot6(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
