//! Weighted means of SPD ensembles under the three metrics.
//!
//! ```text
//! euclidean      sum_i w_i X_i
//! log-euclidean  exp(sum_i w_i log X_i)
//! affine         argmin_M sum_i w_i d_aff(M, X_i)^2
//! ```
//!
//! The affine mean has two evaluators: a one-pass recursive geodesic
//! update (used by the smoothers) and a fixed-point iteration (used as a
//! reference).

use crate::error::{Error, Result};
use crate::spd::{geodesic_step, mat_exp, mat_log, Metric, SpdTensor, SymMatrix};

pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-10;
pub const DEFAULT_FIXED_POINT_MAX_ITER: usize = 200;

#[derive(Clone, Debug)]
pub struct WeightedEnsemble {
    tensors: Vec<SpdTensor>,
    weights: Vec<f64>,
}

impl WeightedEnsemble {
    /// Weights must be non-negative, finite and sum to a positive total;
    /// they are used as given (callers normalize if they want to).
    pub fn new(tensors: Vec<SpdTensor>, weights: Vec<f64>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if tensors.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                left: tensors.len(),
                right: weights.len(),
            });
        }
        let n = tensors[0].dim();
        if let Some(t) = tensors.iter().find(|t| t.dim() != n) {
            return Err(Error::DimensionMismatch {
                left: n,
                right: t.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidWeights("weights sum to zero".into()));
        }
        Ok(WeightedEnsemble { tensors, weights })
    }

    /// Equal weights.
    pub fn uniform(tensors: Vec<SpdTensor>) -> Result<Self> {
        let w = vec![1.0; tensors.len()];
        Self::new(tensors, w)
    }

    pub fn tensors(&self) -> &[SpdTensor] {
        &self.tensors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn mean(&self, metric: Metric) -> Result<SpdTensor> {
        match metric {
            Metric::Euclidean => Ok(self.mean_euclidean()),
            Metric::LogEuclidean => self.mean_log_euclidean(),
            Metric::Affine => Ok(self.mean_affine_recursive()),
        }
    }

    pub fn mean_euclidean(&self) -> SpdTensor {
        let w = self.normalized_weights();
        let mut acc = SymMatrix::zeros(self.tensors[0].dim());
        for (t, wi) in self.tensors.iter().zip(&w) {
            acc.axpy(*wi, t.as_sym());
        }
        // A convex combination of SPD matrices is SPD.
        SpdTensor::from_sym_unchecked(acc)
    }

    pub fn mean_log_euclidean(&self) -> Result<SpdTensor> {
        let w = self.normalized_weights();
        let mut acc = SymMatrix::zeros(self.tensors[0].dim());
        for (t, wi) in self.tensors.iter().zip(&w) {
            if *wi != 0.0 {
                acc.axpy(*wi, &mat_log(t));
            }
        }
        mat_exp(&acc)
    }

    /// One pass of geodesic updates in ensemble order:
    ///
    /// ```text
    /// m_1 = X_1,  m_{j+1} = gamma(m_j, X_{j+1}; w_{j+1} / (w_1 + ... + w_{j+1}))
    /// ```
    ///
    /// Zero-weight members are skipped. Exact for two members and for
    /// commuting ensembles; otherwise an order-dependent approximation.
    pub fn mean_affine_recursive(&self) -> SpdTensor {
        let mut members = self.tensors.iter().zip(&self.weights).filter(|(_, w)| **w > 0.0);
        let (first, w0) = members.next().expect("validated positive total weight");
        let mut m = *first;
        let mut total = *w0;
        for (x, w) in members {
            total += *w;
            m = geodesic_step(&m, x, *w / total);
        }
        m
    }

    /// Fixed-point iteration started at the log-Euclidean mean:
    ///
    /// ```text
    /// G   = sum_i w_i log(M^{-1/2} X_i M^{-1/2})
    /// M  <- M^{1/2} exp(G) M^{1/2}
    /// ```
    ///
    /// Stops when `||G||_F < tol`. The step is halved whenever the residual
    /// grows, which only happens for widely spread ensembles.
    pub fn mean_affine_fixed_point(&self, tol: f64, max_iter: usize) -> Result<FixedPointMean> {
        if self.weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidWeights(
                "fixed-point affine mean needs strictly positive weights".into(),
            ));
        }
        let w = self.normalized_weights();
        let mut m = self.mean_log_euclidean()?;
        let mut step = 1.0;
        let mut prev = f64::INFINITY;
        for iter in 0..=max_iter {
            let (ms, mi) = m.sqrt_pair();
            let mut g = SymMatrix::zeros(m.dim());
            for (x, wi) in self.tensors.iter().zip(&w) {
                let c = x.as_sym().congruence(mi.as_sym());
                g.axpy(*wi, &c.apply(f64::ln)?);
            }
            let residual = g.frobenius_norm();
            if residual < tol {
                return Ok(FixedPointMean {
                    mean: m,
                    iterations: iter,
                    residual,
                });
            }
            if !residual.is_finite() || iter == max_iter {
                return Err(Error::NoConvergence {
                    iterations: iter,
                    residual,
                });
            }
            if residual > prev {
                step *= 0.5;
            }
            prev = residual;
            let e = g.scale(step).exp()?;
            m = SpdTensor::from_sym_unchecked(e.congruence(ms.as_sym()));
        }
        unreachable!("loop returns on the last iteration")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPointMean {
    pub mean: SpdTensor,
    pub iterations: usize,
    pub residual: f64,
}

/// Weighted Euclidean average of arbitrary symmetric matrices (no SPD
/// requirement). Weights are used as given.
pub fn weighted_sum(items: &[SymMatrix], weights: &[f64]) -> SymMatrix {
    assert_eq!(items.len(), weights.len());
    let mut acc = SymMatrix::zeros(items[0].dim());
    for (x, w) in items.iter().zip(weights) {
        acc.axpy(*w, x);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::spd::{affine_distance, affine_geodesic};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> SpdTensor {
        SpdTensor::from_diag(v).unwrap()
    }

    fn rotated(angle: f64, d: &[f64]) -> SpdTensor {
        let (s, c) = angle.sin_cos();
        let r = Mat::from_rows(&[&[c, -s, 0.0], &[s, c, 0.0], &[0.0, 0.0, 1.0]]);
        SpdTensor::new(SymMatrix::from_dense(&((r * Mat::diag(d)) * r.transpose()))).unwrap()
    }

    fn max_diff(a: &SpdTensor, b: &SpdTensor) -> f64 {
        (*a.as_sym() - *b.as_sym()).frobenius_norm()
    }

    #[test]
    fn commuting_means_have_closed_forms() {
        let a = diag(&[1.0, 4.0, 2.0]);
        let b = diag(&[4.0, 1.0, 8.0]);
        let e = WeightedEnsemble::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        let euc = e.mean_euclidean();
        assert_relative_eq!(euc.as_sym().get(0, 0), 2.5);
        assert_relative_eq!(euc.as_sym().get(2, 2), 5.0);
        // Geometric mean along each axis.
        let expected = diag(&[2.0, 2.0, 4.0]);
        assert!(max_diff(&e.mean_log_euclidean().unwrap(), &expected) < 1e-14);
        assert!(max_diff(&e.mean_affine_recursive(), &expected) < 1e-13);
        let fp = e.mean_affine_fixed_point(1e-12, 50).unwrap();
        assert!(max_diff(&fp.mean, &expected) < 1e-12);
    }

    #[test]
    fn single_member_is_returned_unchanged() {
        let a = rotated(0.4, &[3.0, 2.0, 1.0]);
        let e = WeightedEnsemble::uniform(vec![a]).unwrap();
        for m in Metric::ALL {
            assert!(max_diff(&e.mean(m).unwrap(), &a) < 1e-13);
        }
        let fp = e.mean_affine_fixed_point(1e-10, 200).unwrap();
        assert_eq!(fp.iterations, 0);
    }

    #[test]
    fn two_member_recursive_mean_is_the_geodesic_point() {
        let a = rotated(0.3, &[16.0, 0.25, 0.25]);
        let b = rotated(1.2, &[2.0, 0.7, 0.7]);
        let (wa, wb) = (0.3, 0.7);
        let e = WeightedEnsemble::new(vec![a, b], vec![wa, wb]).unwrap();
        let expected = affine_geodesic(&a, &b, wb / (wa + wb)).unwrap();
        assert!(max_diff(&e.mean_affine_recursive(), &expected) < 1e-12);
        let fp = e.mean_affine_fixed_point(1e-12, 200).unwrap();
        assert!(max_diff(&fp.mean, &expected) < 1e-9);
    }

    #[test]
    fn zero_weights_are_skipped() {
        let a = diag(&[1.0, 2.0, 3.0]);
        let b = rotated(0.5, &[5.0, 1.0, 1.0]);
        let with_zero = WeightedEnsemble::new(vec![b, a, b], vec![0.0, 1.0, 1.0]).unwrap();
        let plain = WeightedEnsemble::new(vec![a, b], vec![1.0, 1.0]).unwrap();
        assert!(max_diff(&with_zero.mean_affine_recursive(), &plain.mean_affine_recursive()) < 1e-15);
    }

    #[test]
    fn invalid_ensembles_are_rejected() {
        assert!(matches!(WeightedEnsemble::uniform(vec![]), Err(Error::EmptyEnsemble)));
        let a = diag(&[1.0, 1.0, 1.0]);
        assert!(WeightedEnsemble::new(vec![a], vec![-1.0]).is_err());
        assert!(WeightedEnsemble::new(vec![a, a], vec![0.0, 0.0]).is_err());
        assert!(WeightedEnsemble::new(vec![a], vec![f64::NAN]).is_err());
        assert!(WeightedEnsemble::new(vec![a, SpdTensor::identity(2)], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn fixed_point_failure_reports_residual() {
        let e = WeightedEnsemble::uniform(vec![
            rotated(0.0, &[16.0, 0.25, 0.25]),
            rotated(1.0, &[16.0, 0.25, 0.25]),
            rotated(2.0, &[16.0, 0.25, 0.25]),
        ])
        .unwrap();
        match e.mean_affine_fixed_point(1e-300, 3) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn determinant_interpolation_for_geometric_means() {
        let a = diag(&[16.0, 0.25, 0.25]);
        let b = diag(&[0.25, 16.0, 0.25]);
        let e = WeightedEnsemble::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(e.mean_euclidean().det(), 8.125 * 8.125 * 0.25, epsilon = 1e-12);
        assert_relative_eq!(e.mean_log_euclidean().unwrap().det(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.mean_affine_recursive().det(), 1.0, epsilon = 1e-12);
    }

    fn ensemble_strategy() -> impl Strategy<Value = (Vec<(f64, [f64; 3])>, Vec<f64>)> {
        (2usize..7).prop_flat_map(|n| {
            (
                prop::collection::vec((0.0f64..3.2, prop::array::uniform3(-1.5f64..1.5)), n),
                prop::collection::vec(0.05f64..1.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fixed_point_satisfies_stationarity((members, w) in ensemble_strategy()) {
            let ts: Vec<SpdTensor> = members
                .iter()
                .map(|(a, l)| rotated(*a, &[l[0].exp(), l[1].exp(), l[2].exp()]))
                .collect();
            let e = WeightedEnsemble::new(ts.clone(), w.clone()).unwrap();
            let fp = e.mean_affine_fixed_point(1e-10, 200).unwrap();
            prop_assert!(fp.residual < 1e-10);
            // Mean minimizes the weighted squared distance: small perturbations cost more.
            let cost = |m: &SpdTensor| -> f64 {
                ts.iter().zip(&w).map(|(x, wi)| wi * affine_distance(m, x).powi(2)).sum()
            };
            let c0 = cost(&fp.mean);
            let bumped = SpdTensor::new(*fp.mean.as_sym() + SymMatrix::from_diag(&[1e-3, 0.0, 0.0])).unwrap();
            prop_assert!(c0 <= cost(&bumped) + 1e-12);
            // Means are invariant to weight rescaling.
            let scaled: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
            let e2 = WeightedEnsemble::new(ts, scaled).unwrap();
            prop_assert!(max_diff(&e2.mean_log_euclidean().unwrap(), &e.mean_log_euclidean().unwrap()) < 1e-12);
        }
    }
}
