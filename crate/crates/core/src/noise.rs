//! Gradient schemes, noiseless DWI signals and the two noise models.
//!
//! Each measurement uses a unit gradient direction `b` through
//!
//! ```text
//! x_b = (b1^2, b2^2, b3^2, 2 b1 b2, 2 b1 b3, 2 b2 b3)
//! S_b = s0 exp(-x_b . d)        d = (d11, d22, d33, d12, d13, d23)
//! ```
//!
//! Rician noise acts on signals; spectral noise perturbs tensors directly
//! (eigenvalues by scaled chi-square factors, eigenvectors by the polar
//! factor of `I + eta Z`).

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::phantom::{Grid, TensorField};
use crate::rician::dot6;
use crate::rng::RngSpec;
use crate::spd::{SpdTensor, SymMatrix};

/// Largest accepted condition number of `sum_b x_b x_b^T`.
pub const MAX_DESIGN_CONDITION: f64 = 1e6;
/// `(I + eta Z)^T (I + eta Z)` beyond this condition number is redrawn.
pub const MAX_POLAR_CONDITION: f64 = 1e12;

const RICIAN_CHANNEL: u64 = 0x5249_4349;
const SPECTRAL_CHANNEL: u64 = 0x5350_4543;

pub const DEFAULT_DIRECTIONS: [[f64; 3]; 9] = [
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.3, 0.2, 0.1],
    [0.9, 0.45, 0.2],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [2.0, 1.0, 1.3],
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradientScheme {
    directions: Vec<[f64; 3]>,
    repeats: usize,
    /// One design row per measurement, direction-major.
    design: Vec<[f64; 6]>,
}

pub fn design_row(b: &[f64; 3]) -> [f64; 6] {
    [
        b[0] * b[0],
        b[1] * b[1],
        b[2] * b[2],
        2.0 * b[0] * b[1],
        2.0 * b[0] * b[2],
        2.0 * b[1] * b[2],
    ]
}

impl GradientScheme {
    /// Directions are normalized; the design must be well conditioned.
    pub fn new(directions: &[[f64; 3]], repeats: usize) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::InvalidInput("repeats must be at least 1".into()));
        }
        let mut dirs = Vec::with_capacity(directions.len());
        for b in directions {
            let norm = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::InvalidInput(format!("gradient direction {b:?} has no length")));
            }
            dirs.push([b[0] / norm, b[1] / norm, b[2] / norm]);
        }
        let design: Vec<[f64; 6]> = dirs
            .iter()
            .flat_map(|b| std::iter::repeat_n(design_row(b), repeats))
            .collect();
        let scheme = GradientScheme {
            directions: dirs,
            repeats,
            design,
        };
        let cond = SymMatrix::from_dense(&scheme.gram()).eig()?.condition_number();
        if !(cond < MAX_DESIGN_CONDITION) {
            return Err(Error::IllConditioned(cond));
        }
        Ok(scheme)
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn repeats(&self) -> usize {
        self.repeats
    }

    pub fn design(&self) -> &[[f64; 6]] {
        &self.design
    }

    pub fn n_measurements(&self) -> usize {
        self.design.len()
    }

    /// `(direction index, repeat index)` of measurement `m`.
    pub fn measurement(&self, m: usize) -> (usize, usize) {
        (m / self.repeats, m % self.repeats)
    }

    /// `sum_b x_b x_b^T`.
    pub fn gram(&self) -> Mat {
        self.design
            .iter()
            .fold(Mat::zeros(6), |acc, x| acc + Mat::outer(x, x))
    }

    /// Noiseless signals for one tensor.
    pub fn signals(&self, d: &SymMatrix, s0: f64) -> Vec<f64> {
        let dv = d.to_tensor_vec();
        self.design.iter().map(|x| s0 * (-dot6(x, &dv)).exp()).collect()
    }
}

/// The nine-direction scheme, each direction measured `repeats` times.
pub fn default_scheme(repeats: usize) -> Result<GradientScheme> {
    GradientScheme::new(&DEFAULT_DIRECTIONS, repeats)
}

/// Signals for every voxel and measurement, voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiVolume {
    pub grid: Grid,
    pub s0: f64,
    pub n_measurements: usize,
    pub signals: Vec<f64>,
}

impl DwiVolume {
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.signals[index * self.n_measurements..(index + 1) * self.n_measurements]
    }
}

pub fn noiseless_dwi(field: &TensorField, scheme: &GradientScheme, s0: f64) -> Result<DwiVolume> {
    if !(s0.is_finite() && s0 > 0.0) {
        return Err(Error::OutOfRange {
            name: "s0",
            value: s0,
            expected: "s0 > 0",
        });
    }
    let signals = field
        .values
        .par_iter()
        .flat_map_iter(|d| scheme.signals(d, s0))
        .collect();
    Ok(DwiVolume {
        grid: field.grid,
        s0,
        n_measurements: scheme.n_measurements(),
        signals,
    })
}

/// `S = |S_bar (1, 0) + sigma eps|` for a single measurement.
pub fn rician_sample<R: Rng>(s_bar: f64, sigma: f64, rng: &mut R) -> f64 {
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    (s_bar + sigma * e1).hypot(sigma * e2)
}

/// Rician corruption of every signal; stream `(voxel, measurement)`.
pub fn rician_corrupt(volume: &DwiVolume, sigma: f64, rng: &RngSpec) -> Result<DwiVolume> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::OutOfRange {
            name: "sigma",
            value: sigma,
            expected: "sigma > 0",
        });
    }
    let spec = rng.derive(RICIAN_CHANNEL);
    let m = volume.n_measurements;
    let signals = volume
        .signals
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut r = spec.stream((k / m) as u64, (k % m) as u64);
            rician_sample(*s, sigma, &mut r)
        })
        .collect();
    Ok(DwiVolume {
        signals,
        ..volume.clone()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SpectralDraw {
    pub tensor: SpdTensor,
    /// Number of rejected rotation draws.
    pub redraws: usize,
}

/// Chi-square eigenvalue scaling and polar-factor rotation of one tensor.
pub fn spectral_sample<R: Rng>(d: &SpdTensor, nu: usize, eta: f64, rng: &mut R) -> Result<SpectralDraw> {
    if nu == 0 {
        return Err(Error::InvalidInput("spectral degrees of freedom must be positive".into()));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::OutOfRange {
            name: "eta",
            value: eta,
            expected: "eta >= 0",
        });
    }
    let n = d.dim();
    let e = d.eig();
    let mut scaled = [0.0; 6];
    for (k, l) in e.values().iter().enumerate() {
        let chi2: f64 = (0..nu).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
        scaled[k] = l * chi2 / nu as f64;
    }
    let mut redraws = 0;
    let rotation = loop {
        let a = Mat::from_fn(n, |i, j| {
            let z: f64 = rng.sample(StandardNormal);
            let delta = if i == j { 1.0 } else { 0.0 };
            delta + eta * z
        });
        let ata = SymMatrix::from_dense(&(a.transpose() * a));
        let eig = ata.eig()?;
        if eig.condition_number() > MAX_POLAR_CONDITION {
            redraws += 1;
            continue;
        }
        break a * eig.map(|l| 1.0 / l.sqrt()).to_dense();
    };
    let vectors = rotation * e.vectors();
    let s = SymMatrix::from_fn(n, |i, j| (0..n).map(|k| scaled[k] * vectors[(i, k)] * vectors[(j, k)]).sum());
    // Eigenvalues are positive almost surely; reject the measure-zero rest.
    Ok(SpectralDraw {
        tensor: SpdTensor::new(s)?,
        redraws,
    })
}

/// Spectral noise on every voxel of an SPD field; stream `(voxel, 0)`.
/// Returns the noisy field and the total number of rotation redraws.
pub fn spectral_corrupt(field: &TensorField, nu: usize, eta: f64, rng: &RngSpec) -> Result<(TensorField, usize)> {
    let spec = rng.derive(SPECTRAL_CHANNEL);
    let tensors = field.to_spd()?;
    let draws: Vec<SpectralDraw> = tensors
        .par_iter()
        .enumerate()
        .map(|(i, d)| spectral_sample(d, nu, eta, &mut spec.stream(i as u64, 0)))
        .collect::<Result<_>>()?;
    let redraws = draws.iter().map(|d| d.redraws).sum();
    let values = draws.into_iter().map(|d| d.tensor.into_sym()).collect();
    Ok((TensorField::new(field.grid, values)?, redraws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, PhantomSpec};
    use approx::assert_relative_eq;

    #[test]
    fn default_scheme_shape() {
        let s = default_scheme(2).unwrap();
        assert_eq!(s.n_measurements(), 18);
        assert_eq!(s.measurement(5), (2, 1));
        for b in s.directions() {
            assert_relative_eq!(b.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-15);
        }
        // x_b . vec(I) = |b|^2 = 1
        for x in s.design() {
            assert_relative_eq!(x[0] + x[1] + x[2], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn degenerate_scheme_is_rejected() {
        let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(GradientScheme::new(&dirs, 2), Err(Error::IllConditioned(_))));
        assert!(GradientScheme::new(&[[0.0, 0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn identity_signal_is_s0_over_e() {
        let s = default_scheme(1).unwrap();
        for v in s.signals(&SymMatrix::identity(3), 10.0) {
            assert_relative_eq!(v, 10.0 * (-1.0f64).exp(), epsilon = 1e-14);
        }
        // Direction (0, 1, 0) on diag(.25, 16, .25).
        let sig = s.signals(&SymMatrix::from_diag(&[0.25, 16.0, 0.25]), 10.0);
        assert_relative_eq!(sig[6], 10.0 * (-16.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn rician_rejects_bad_sigma_and_is_reproducible() {
        let spec = PhantomSpec::crossing_toy();
        let f = build_phantom(&spec).unwrap();
        let v = noiseless_dwi(&f, &default_scheme(2).unwrap(), 10.0).unwrap();
        assert!(rician_corrupt(&v, 0.0, &RngSpec::new(1)).is_err());
        assert!(rician_corrupt(&v, -1.0, &RngSpec::new(1)).is_err());
        let a = rician_corrupt(&v, 0.5, &RngSpec::new(1)).unwrap();
        let b = rician_corrupt(&v, 0.5, &RngSpec::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.signals.iter().all(|s| *s >= 0.0));
        assert_ne!(a, rician_corrupt(&v, 0.5, &RngSpec::new(2)).unwrap());
    }

    #[test]
    fn rician_moments() {
        // E S^2 = S_bar^2 + 2 sigma^2
        let spec = RngSpec::new(3);
        let (s_bar, sigma) = (2.0, 0.5);
        let n = 200_000;
        let m2: f64 = (0..n)
            .map(|i| rician_sample(s_bar, sigma, &mut spec.stream(i, 0)).powi(2))
            .sum::<f64>()
            / n as f64;
        let expected = s_bar * s_bar + 2.0 * sigma * sigma;
        // Var S^2 = 4 S^2 s^2 + 4 s^4 -> se ~ 0.0047
        assert!((m2 - expected).abs() < 4.0 * 0.0047, "{m2} vs {expected}");
    }

    #[test]
    fn spectral_preserves_isotropic_eigenvectors_at_eta_zero() {
        let d = SpdTensor::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let spec = RngSpec::new(9);
        let draw = spectral_sample(&d, 20, 0.0, &mut spec.stream(0, 0)).unwrap();
        let s = draw.tensor.as_sym();
        assert_eq!(draw.redraws, 0);
        assert!(s.get(0, 1).abs() < 1e-14 && s.get(0, 2).abs() < 1e-14);
    }

    #[test]
    fn spectral_eigenvalue_factor_has_unit_mean() {
        let d = SpdTensor::from_diag(&[16.0, 0.25, 0.25]).unwrap();
        let spec = RngSpec::new(4);
        let n = 20_000;
        let (nu, eta) = (20, 0.3);
        let mut tr = 0.0;
        for i in 0..n {
            tr += spectral_sample(&d, nu, eta, &mut spec.stream(i, 0)).unwrap().tensor.as_sym().trace();
        }
        let mean = tr / n as f64;
        // Rotation preserves the trace; chi2/nu has mean 1 and variance 2/nu.
        let se = (2.0 / nu as f64 * (256.0 + 2.0 * 0.0625)).sqrt() / (n as f64).sqrt();
        assert!((mean - 16.5).abs() < 4.0 * se, "{mean}");
    }

    #[test]
    fn spectral_field_is_spd_and_reproducible() {
        let f = build_phantom(&PhantomSpec::crossing_toy()).unwrap();
        let (a, ra) = spectral_corrupt(&f, 20, 0.3, &RngSpec::new(5)).unwrap();
        let (b, rb) = spectral_corrupt(&f, 20, 0.3, &RngSpec::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a.count_non_spd(), 0);
    }
}
