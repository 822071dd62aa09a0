//! Kernel smoothing of tensor fields.
//!
//! Raw weights `exp(-d^2 / 2h^2)` are computed over a voxel window around
//! the center, raw values below the threshold are dropped and the rest
//! renormalized. Isotropic weights use physical distance; anisotropic
//! weights use `d^2 = tr(D) v^T D^{-1} v` with `D` from a first isotropic
//! pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::karcher::WeightedEnsemble;
use crate::phantom::{Grid, TensorField};
use crate::spd::{mat_exp, mat_log, Metric, SpdTensor, SymMatrix};

pub const DEFAULT_THRESHOLD: f64 = 1e-6;
/// Half-widths of the voxel window in x, y, z.
pub const DEFAULT_WINDOW_RADIUS: [usize; 3] = [3, 3, 1];
/// Anisotropic weights fall back to isotropic ones beyond this condition number.
pub const MAX_ANISO_CONDITION: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scheme {
    Isotropic { h: f64 },
    Anisotropic { h_iso: f64, h_aniso: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Isotropic { .. } => "isotropic",
            Scheme::Anisotropic { .. } => "anisotropic",
        }
    }

    /// Bandwidth label: `h` or `h_iso/h_aniso`.
    pub fn label(&self) -> String {
        match self {
            Scheme::Isotropic { h } => format!("{h}"),
            Scheme::Anisotropic { h_iso, h_aniso } => format!("{h_iso}/{h_aniso}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub metric: Metric,
    pub scheme: Scheme,
    pub threshold: f64,
    pub window_radius: [usize; 3],
}

impl SmoothingConfig {
    pub fn new(metric: Metric, scheme: Scheme) -> Self {
        SmoothingConfig {
            metric,
            scheme,
            threshold: DEFAULT_THRESHOLD,
            window_radius: DEFAULT_WINDOW_RADIUS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hs = match self.scheme {
            Scheme::Isotropic { h } => vec![h],
            Scheme::Anisotropic { h_iso, h_aniso } => vec![h_iso, h_aniso],
        };
        for h in hs {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::OutOfRange {
                    name: "bandwidth",
                    value: h,
                    expected: "h > 0",
                });
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::OutOfRange {
                name: "threshold",
                value: self.threshold,
                expected: "0 < threshold < 1",
            });
        }
        Ok(())
    }
}

/// Normalized weights of one neighborhood, ordered by ascending spatial
/// distance from the center with ties broken by voxel index.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy)]
struct Offset {
    d: [isize; 3],
    delta: [f64; 3],
    dist2: f64,
    linear: isize,
}

/// Window offsets in traversal order (distance, then linear offset).
fn window_offsets(grid: &Grid, radius: [usize; 3]) -> Vec<Offset> {
    let r = radius.map(|v| v as isize);
    let mut out = Vec::new();
    for dz in -r[2]..=r[2] {
        for dy in -r[1]..=r[1] {
            for dx in -r[0]..=r[0] {
                let delta = [
                    dx as f64 * grid.spacing[0],
                    dy as f64 * grid.spacing[1],
                    dz as f64 * grid.spacing[2],
                ];
                out.push(Offset {
                    d: [dx, dy, dz],
                    delta,
                    dist2: delta.iter().map(|v| v * v).sum(),
                    linear: dx + grid.dims[0] as isize * (dy + grid.dims[1] as isize * dz),
                });
            }
        }
    }
    out.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.linear.cmp(&b.linear)));
    out
}

fn shifted(grid: &Grid, center: [usize; 3], d: [isize; 3]) -> Option<usize> {
    let mut c = [0usize; 3];
    for k in 0..3 {
        let v = center[k] as isize + d[k];
        if v < 0 || v >= grid.dims[k] as isize {
            return None;
        }
        c[k] = v as usize;
    }
    Some(grid.index(c[0], c[1], c[2]))
}

fn collect(grid: &Grid, center: usize, offsets: &[Offset], threshold: f64, raw: impl Fn(&Offset) -> f64) -> Neighborhood {
    let c = grid.coords(center);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for o in offsets {
        let Some(i) = shifted(grid, c, o.d) else { continue };
        let w = raw(o);
        if w >= threshold {
            indices.push(i);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Neighborhood { indices, weights }
}

/// Isotropic weights around `center`.
pub fn iso_weights(grid: &Grid, center: usize, h: f64, threshold: f64, window_radius: [usize; 3]) -> Neighborhood {
    let offsets = window_offsets(grid, window_radius);
    iso_from_offsets(grid, center, &offsets, h, threshold)
}

fn iso_from_offsets(grid: &Grid, center: usize, offsets: &[Offset], h: f64, threshold: f64) -> Neighborhood {
    let s = 0.5 / (h * h);
    collect(grid, center, offsets, threshold, |o| (-o.dist2 * s).exp())
}

/// Anisotropic weights shaped by `shape`; `None` if `shape` is too badly
/// conditioned (the caller falls back to isotropic weights).
pub fn aniso_weights(
    grid: &Grid,
    center: usize,
    shape: &SpdTensor,
    h: f64,
    threshold: f64,
    window_radius: [usize; 3],
) -> Option<Neighborhood> {
    let offsets = window_offsets(grid, window_radius);
    aniso_from_offsets(grid, center, &offsets, shape, h, threshold)
}

fn aniso_from_offsets(
    grid: &Grid,
    center: usize,
    offsets: &[Offset],
    shape: &SpdTensor,
    h: f64,
    threshold: f64,
) -> Option<Neighborhood> {
    if shape.dim() != 3 || shape.eig().condition_number() > MAX_ANISO_CONDITION {
        return None;
    }
    let metric = shape.inverse().into_sym().scale(shape.as_sym().trace());
    let s = 0.5 / (h * h);
    Some(collect(grid, center, offsets, threshold, |o| {
        let v = o.delta;
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += v[i] * metric.get(i, j) * v[j];
            }
        }
        (-q * s).exp()
    }))
}

/// Summary of one normalized weight distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub size: usize,
    /// Fewest largest weights whose sum reaches 0.99.
    pub n99: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub entropy: f64,
}

pub fn weight_profile(weights: &[f64]) -> Result<WeightProfile> {
    if weights.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cum = 0.0;
    let mut n99 = n;
    for (k, w) in sorted.iter().rev().enumerate() {
        cum += w;
        if cum >= 0.99 {
            n99 = k + 1;
            break;
        }
    }
    let entropy = -sorted.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>();
    Ok(WeightProfile {
        size: n,
        n99,
        min: sorted[0],
        median: median_sorted(&sorted),
        max: sorted[n - 1],
        entropy: entropy.max(0.0),
    })
}

pub(crate) fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct Smoothed {
    pub field: TensorField,
    /// Voxels whose anisotropic weights fell back to isotropic ones.
    pub fallbacks: usize,
}

/// Per-metric view of the input field.
enum Prepared<'a> {
    Euclidean(&'a [SymMatrix]),
    Log(Vec<SymMatrix>),
    Affine(Vec<SpdTensor>),
}

impl Prepared<'_> {
    fn new(field: &TensorField, metric: Metric) -> Result<Prepared<'_>> {
        Ok(match metric {
            Metric::Euclidean => Prepared::Euclidean(&field.values),
            Metric::LogEuclidean => Prepared::Log(field.to_spd()?.par_iter().map(mat_log).collect()),
            Metric::Affine => Prepared::Affine(field.to_spd()?),
        })
    }

    fn mean(&self, nb: &Neighborhood) -> Result<SymMatrix> {
        match self {
            Prepared::Euclidean(v) => {
                let mut acc = SymMatrix::zeros(v[nb.indices[0]].dim());
                for (i, w) in nb.indices.iter().zip(&nb.weights) {
                    acc.axpy(*w, &v[*i]);
                }
                Ok(acc)
            }
            Prepared::Log(logs) => {
                let mut acc = SymMatrix::zeros(logs[nb.indices[0]].dim());
                for (i, w) in nb.indices.iter().zip(&nb.weights) {
                    acc.axpy(*w, &logs[*i]);
                }
                Ok(mat_exp(&acc)?.into_sym())
            }
            Prepared::Affine(t) => {
                let members = nb.indices.iter().map(|i| t[*i]).collect();
                let ens = WeightedEnsemble::new(members, nb.weights.clone())?;
                Ok(ens.mean_affine_recursive().into_sym())
            }
        }
    }
}

fn smooth_with(field: &TensorField, metric: Metric, neighborhood: impl Fn(usize) -> Neighborhood + Sync) -> Result<TensorField> {
    let prepared = Prepared::new(field, metric)?;
    let values = (0..field.len())
        .into_par_iter()
        .map(|i| prepared.mean(&neighborhood(i)))
        .collect::<Result<_>>()?;
    TensorField::new(field.grid, values)
}

/// Smooth every voxel. Geometric metrics require an SPD field.
pub fn smooth_field(field: &TensorField, cfg: &SmoothingConfig) -> Result<Smoothed> {
    cfg.validate()?;
    let grid = field.grid;
    let offsets = window_offsets(&grid, cfg.window_radius);
    match cfg.scheme {
        Scheme::Isotropic { h } => {
            let out = smooth_with(field, cfg.metric, |i| iso_from_offsets(&grid, i, &offsets, h, cfg.threshold))?;
            Ok(Smoothed {
                field: out,
                fallbacks: 0,
            })
        }
        Scheme::Anisotropic { h_iso, h_aniso } => {
            let stage1 = smooth_with(field, cfg.metric, |i| iso_from_offsets(&grid, i, &offsets, h_iso, cfg.threshold))?;
            let neighborhoods: Vec<Option<Neighborhood>> = (0..grid.len())
                .into_par_iter()
                .map(|i| {
                    SpdTensor::new(stage1.values[i])
                        .ok()
                        .and_then(|shape| aniso_from_offsets(&grid, i, &offsets, &shape, h_aniso, cfg.threshold))
                })
                .collect();
            let fallbacks = neighborhoods.iter().filter(|n| n.is_none()).count();
            let out = smooth_with(&stage1, cfg.metric, |i| match &neighborhoods[i] {
                Some(n) => n.clone(),
                None => iso_from_offsets(&grid, i, &offsets, h_aniso, cfg.threshold),
            })?;
            Ok(Smoothed { field: out, fallbacks })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, PhantomSpec};
    use approx::assert_relative_eq;

    fn grid() -> Grid {
        Grid::new([16, 16, 4], [0.01875, 0.01875, 0.05]).unwrap()
    }

    #[test]
    fn tiny_bandwidth_keeps_only_the_center() {
        let g = grid();
        let c = g.index(5, 5, 1);
        let nb = iso_weights(&g, c, 1e-4, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS);
        assert_eq!(nb.indices, vec![c]);
        assert_eq!(nb.weights, vec![1.0]);
        let p = weight_profile(&nb.weights).unwrap();
        assert_eq!((p.size, p.n99, p.entropy), (1, 1, 0.0));
    }

    #[test]
    fn weights_sum_to_one_at_edges() {
        let g = grid();
        for c in [0, g.index(15, 0, 3), g.index(7, 8, 0)] {
            let nb = iso_weights(&g, c, 0.025, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS);
            assert_relative_eq!(nb.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            assert_eq!(nb.indices[0], c);
        }
    }

    #[test]
    fn uniform_profile_entropy() {
        let p = weight_profile(&[0.25; 4]).unwrap();
        assert_relative_eq!(p.entropy, 4f64.ln(), epsilon = 1e-15);
        assert_eq!(p.n99, 4);
        assert_eq!(p.median, 0.25);
    }

    #[test]
    fn entropy_grows_with_bandwidth() {
        let g = grid();
        let c = g.index(8, 8, 2);
        let mut last = -1.0;
        for h in [0.002, 0.005, 0.01, 0.015, 0.025, 0.035, 0.05] {
            let e = weight_profile(&iso_weights(&g, c, h, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS).weights).unwrap().entropy;
            assert!(e >= last, "h={h}");
            last = e;
        }
    }

    #[test]
    fn isotropic_shape_reduces_to_iso_weights() {
        let g = grid();
        let c = g.index(8, 8, 2);
        let shape = SpdTensor::from_diag(&[2.0, 2.0, 2.0]).unwrap();
        let a = aniso_weights(&g, c, &shape, 0.02, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS).unwrap();
        let b = iso_weights(&g, c, 0.02 / 3f64.sqrt(), DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS);
        assert_eq!(a.indices, b.indices);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn aniso_weights_follow_the_tensor() {
        let g = grid();
        let c = g.index(8, 8, 2);
        let shape = SpdTensor::from_diag(&[16.0, 0.25, 0.25]).unwrap();
        let nb = aniso_weights(&g, c, &shape, 0.05, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS).unwrap();
        let w = |i| nb.indices.iter().position(|k| *k == i).map(|p| nb.weights[p]).unwrap_or(0.0);
        assert!(w(g.index(9, 8, 2)) > w(g.index(8, 9, 2)));
        // 0-homogeneous in the tensor.
        let scaled = SpdTensor::new(shape.as_sym().scale(10.0)).unwrap();
        let nb10 = aniso_weights(&g, c, &scaled, 0.05, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS).unwrap();
        assert_eq!(nb.indices, nb10.indices);
        for (x, y) in nb.weights.iter().zip(&nb10.weights) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
        // Near-singular tensors are refused.
        let bad = SpdTensor::from_diag(&[1.0, 1.0, 1e-11]).unwrap();
        assert!(aniso_weights(&g, c, &bad, 0.05, DEFAULT_THRESHOLD, DEFAULT_WINDOW_RADIUS).is_none());
    }

    #[test]
    fn constant_field_is_unchanged() {
        let g = Grid::new([6, 5, 2], [0.01875, 0.01875, 0.05]).unwrap();
        let d = SymMatrix::from_tensor_vec(&[2.0, 1.0, 0.5, 0.3, 0.1, -0.2]);
        let f = TensorField::new(g, vec![d; g.len()]).unwrap();
        for metric in Metric::ALL {
            for scheme in [
                Scheme::Isotropic { h: 0.02 },
                Scheme::Anisotropic {
                    h_iso: 0.01,
                    h_aniso: 0.02,
                },
            ] {
                let out = smooth_field(&f, &SmoothingConfig::new(metric, scheme)).unwrap();
                for v in &out.field.values {
                    assert!((*v - d).frobenius_norm() < 1e-12, "{metric} {scheme:?}");
                }
            }
        }
    }

    #[test]
    fn two_voxel_midpoints() {
        let g = Grid::new([2, 1, 1], [1.0, 1.0, 1.0]).unwrap();
        let a = SpdTensor::from_diag(&[16.0, 0.25, 0.25]).unwrap();
        let b = SpdTensor::from_diag(&[0.25, 16.0, 0.25]).unwrap();
        let f = TensorField::new(g, vec![a.into_sym(), b.into_sym()]).unwrap();
        // Huge bandwidth: equal weights.
        let scheme = Scheme::Isotropic { h: 1e6 };
        let eu = smooth_field(&f, &SmoothingConfig::new(Metric::Euclidean, scheme)).unwrap();
        assert!((eu.field.values[0] - SymMatrix::from_diag(&[8.125, 8.125, 0.25])).frobenius_norm() < 1e-9);
        for metric in [Metric::LogEuclidean, Metric::Affine] {
            let out = smooth_field(&f, &SmoothingConfig::new(metric, scheme)).unwrap();
            for v in &out.field.values {
                assert!((*v - SymMatrix::from_diag(&[2.0, 2.0, 0.25])).frobenius_norm() < 1e-9, "{metric}");
            }
        }
    }

    #[test]
    fn commuting_fields_agree_across_geometric_metrics() {
        let spec = PhantomSpec::crossing_toy();
        let f = build_phantom(&spec).unwrap();
        let scheme = Scheme::Isotropic { h: 0.025 };
        let le = smooth_field(&f, &SmoothingConfig::new(Metric::LogEuclidean, scheme)).unwrap();
        let af = smooth_field(&f, &SmoothingConfig::new(Metric::Affine, scheme)).unwrap();
        for (x, y) in le.field.values.iter().zip(&af.field.values) {
            assert!((*x - *y).frobenius_norm() < 1e-9);
        }
    }

    #[test]
    fn geometric_metrics_reject_indefinite_voxels() {
        let g = Grid::new([3, 1, 1], [1.0, 1.0, 1.0]).unwrap();
        let mut v = vec![SymMatrix::identity(3); 3];
        v[1] = SymMatrix::from_diag(&[1.0, -1.0, 1.0]);
        let f = TensorField::new(g, v).unwrap();
        let scheme = Scheme::Isotropic { h: 1.0 };
        assert!(smooth_field(&f, &SmoothingConfig::new(Metric::Euclidean, scheme)).is_ok());
        let err = smooth_field(&f, &SmoothingConfig::new(Metric::Affine, scheme)).unwrap_err();
        assert!(matches!(err, Error::NonSpdVoxel { index: 1, .. }));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let f = build_phantom(&PhantomSpec::crossing_toy()).unwrap();
        let mut cfg = SmoothingConfig::new(Metric::Euclidean, Scheme::Isotropic { h: 0.0 });
        assert!(smooth_field(&f, &cfg).is_err());
        cfg.scheme = Scheme::Isotropic { h: 0.01 };
        cfg.threshold = 1.5;
        assert!(smooth_field(&f, &cfg).is_err());
    }
}
