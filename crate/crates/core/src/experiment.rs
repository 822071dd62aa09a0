//! Experiment configuration and the per-seed simulation pipeline:
//! phantom, noise, fit (Rician only), smoothing grid, region summaries.

use std::fs::File;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{error_field, region_summary, swelling_fraction, Region, DEFAULT_SWELLING_MARGIN, SWELLING_RADIUS};
use crate::error::{Error, Result};
use crate::io::read_band_table;
use crate::noise::{default_scheme, noiseless_dwi, rician_corrupt, spectral_corrupt, DwiVolume, GradientScheme};
use crate::phantom::{build_phantom, region_masks, Grid, PhantomSpec, RegionMask, TensorField};
use crate::perturbation::{DEFAULT_FAMILY_SIZE, DEFAULT_T_GRID};
use crate::regression::{fit_volume, project, FitMethod, FitOptions, FittedVolume};
use crate::rng::RngSpec;
use crate::smoothing::{
    iso_weights, smooth_field, weight_profile, Scheme, SmoothingConfig, WeightProfile, DEFAULT_THRESHOLD,
    DEFAULT_WINDOW_RADIUS,
};
use crate::spd::{Metric, SpdTensor};

/// Stream tag for the noise draws of a seed.
pub const NOISE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output: OutputConfig,
    pub phantom: PhantomConfig,
    pub noise: NoiseConfig,
    pub fit: FitConfig,
    pub smoothing: SmoothingGrid,
    pub swelling: SwellingConfig,
    pub weights: WeightsConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1],
            output: OutputConfig::default(),
            phantom: PhantomConfig::default(),
            noise: NoiseConfig::default(),
            fit: FitConfig::default(),
            smoothing: SmoothingGrid::default(),
            swelling: SwellingConfig::default(),
            weights: WeightsConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Falls back to the environment default, then `./out`.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomPreset {
    /// The 128 x 128 x 4 crossing-band phantom.
    Standard,
    /// Two orthogonal unit-determinant bands on a 24 x 24 x 1 grid.
    CrossingToy,
}

impl PhantomPreset {
    pub fn spec(&self) -> PhantomSpec {
        match self {
            PhantomPreset::Standard => PhantomSpec::standard(),
            PhantomPreset::CrossingToy => PhantomSpec::crossing_toy(),
        }
    }
}

/// Unset fields take the preset's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub preset: PhantomPreset,
    pub dims: Option<[usize; 3]>,
    pub spacing: [f64; 3],
    pub background: Option<[f64; 3]>,
    /// CSV `layout,orientation,lo,hi,dxx,dyy,dzz` replacing the preset's bands.
    pub band_table: Option<PathBuf>,
    /// Layout index per slice; required with a multi-layout band table.
    pub slice_layout: Option<Vec<usize>>,
    pub vertical_bands_x_oriented: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            preset: PhantomPreset::Standard,
            dims: None,
            spacing: PhantomSpec::standard().grid.spacing,
            background: None,
            band_table: None,
            slice_layout: None,
            vertical_bands_x_oriented: false,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self) -> Result<PhantomSpec> {
        let mut spec = self.preset.spec();
        let dims = self.dims.unwrap_or(spec.grid.dims);
        spec.grid = Grid::new(dims, self.spacing)?;
        if let Some(b) = self.background {
            spec.background = b;
        }
        if let Some(path) = &self.band_table {
            let file = File::open(path)
                .map_err(|e| Error::InvalidInput(format!("band table {}: {e}", path.display())))?;
            spec.layouts = read_band_table(file)?;
            if spec.layouts.len() == 1 {
                spec.slice_layout = vec![0; dims[2]];
            }
        }
        if let Some(sl) = &self.slice_layout {
            spec.slice_layout = sl.clone();
        }
        if self.vertical_bands_x_oriented {
            spec = spec.with_x_oriented_vertical_bands();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Rician,
    Spectral,
}

impl NoiseModel {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::Rician => "rician",
            NoiseModel::Spectral => "spectral",
        }
    }
}

/// Rician keys: `sigma`, `repeats`, `s0`, `scheme_file`. Spectral keys:
/// `nu`, `eta`. Keys of the other model are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub model: NoiseModel,
    pub sigma: f64,
    pub repeats: usize,
    pub s0: f64,
    /// CSV `bx,by,bz`; the built-in nine directions otherwise.
    pub scheme_file: Option<PathBuf>,
    pub nu: usize,
    pub eta: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            model: NoiseModel::Rician,
            sigma: 0.1,
            repeats: 2,
            s0: 10.0,
            scheme_file: None,
            nu: 20,
            eta: 0.3,
        }
    }
}

impl NoiseConfig {
    pub fn scheme(&self) -> Result<GradientScheme> {
        match &self.scheme_file {
            None => default_scheme(self.repeats),
            Some(path) => {
                let file = File::open(path)
                    .map_err(|e| Error::InvalidInput(format!("scheme file {}: {e}", path.display())))?;
                GradientScheme::new(&crate::io::read_scheme(file)?, self.repeats)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Project indefinite estimates before geometric smoothing. Without it
    /// an indefinite voxel is an error for the geometric smoothers.
    pub project: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub max_failure_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = FitOptions::default();
        FitConfig {
            method: FitMethod::Nonlinear,
            project: true,
            tol: o.tol,
            max_iter: o.max_iter,
            max_failure_fraction: 0.01,
        }
    }
}

impl FitConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            project: self.project,
            ..FitOptions::default()
        }
    }
}

/// Metrics crossed with every isotropic bandwidth and anisotropic pair.
/// An empty metric list runs the unsmoothed baseline only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingGrid {
    pub metrics: Vec<Metric>,
    pub isotropic: Vec<f64>,
    /// `[h_iso, h_aniso]` pairs.
    pub anisotropic: Vec<[f64; 2]>,
    pub threshold: f64,
    pub window_radius: [usize; 3],
}

impl Default for SmoothingGrid {
    fn default() -> Self {
        SmoothingGrid {
            metrics: Metric::ALL.to_vec(),
            isotropic: vec![0.005, 0.01, 0.025, 0.035],
            anisotropic: vec![[0.005, 0.01], [0.01, 0.01], [0.01, 0.025]],
            threshold: DEFAULT_THRESHOLD,
            window_radius: DEFAULT_WINDOW_RADIUS,
        }
    }
}

impl SmoothingGrid {
    pub fn schemes(&self) -> Vec<Scheme> {
        self.isotropic
            .iter()
            .map(|h| Scheme::Isotropic { h: *h })
            .chain(self.anisotropic.iter().map(|p| Scheme::Anisotropic {
                h_iso: p[0],
                h_aniso: p[1],
            }))
            .collect()
    }

    /// Metric-major job list.
    pub fn jobs(&self) -> Vec<SmoothingConfig> {
        let schemes = self.schemes();
        self.metrics
            .iter()
            .flat_map(|m| {
                schemes.iter().map(move |s| SmoothingConfig {
                    metric: *m,
                    scheme: *s,
                    threshold: self.threshold,
                    window_radius: self.window_radius,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwellingConfig {
    pub margin: f64,
    pub radius: [usize; 3],
}

impl Default for SwellingConfig {
    fn default() -> Self {
        SwellingConfig {
            margin: DEFAULT_SWELLING_MARGIN,
            radius: SWELLING_RADIUS,
        }
    }
}

/// Reference voxel for weight profiles, the grid center by default. Away
/// from the edges the profile does not depend on the choice.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub voxel: Option<[usize; 3]>,
}

impl WeightsConfig {
    pub fn voxel_in(&self, grid: &Grid) -> [usize; 3] {
        self.voxel.unwrap_or(grid.dims.map(|d| d / 2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub t_grid: Vec<f64>,
    pub family_size: usize,
    /// Replicates for the small-noise variance checks.
    pub replicates: usize,
    /// Replicates for the control-variate bias check.
    pub bias_replicates: usize,
    pub mle_replicates: usize,
    pub signal_bias_draws: usize,
    pub random_tensors: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            t_grid: DEFAULT_T_GRID.to_vec(),
            family_size: DEFAULT_FAMILY_SIZE,
            replicates: 100_000,
            bias_replicates: 100_000,
            mle_replicates: 20_000,
            signal_bias_draws: 1_000_000,
            random_tensors: 50,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        let grid = self.phantom.spec()?.grid;
        let v = self.weights.voxel_in(&grid);
        check((0..3).all(|k| v[k] < grid.dims[k]), || {
            format!("weights.voxel {v:?} outside grid {:?}", grid.dims)
        })?;
        let n = &self.noise;
        match n.model {
            NoiseModel::Rician => {
                check(n.sigma.is_finite() && n.sigma > 0.0, || format!("noise.sigma = {} must be > 0", n.sigma))?;
                check(n.s0.is_finite() && n.s0 > 0.0, || format!("noise.s0 = {} must be > 0", n.s0))?;
                n.scheme()?;
            }
            NoiseModel::Spectral => {
                check(n.nu > 0, || "noise.nu must be positive".into())?;
                check(n.eta.is_finite() && n.eta > 0.0, || format!("noise.eta = {} must be > 0", n.eta))?;
            }
        }
        let f = &self.fit;
        check((0.0..=1.0).contains(&f.max_failure_fraction), || {
            "fit.max_failure_fraction must lie in [0, 1]".into()
        })?;
        check(f.tol > 0.0 && f.max_iter > 0, || "fit.tol and fit.max_iter must be positive".into())?;
        let s = &self.smoothing;
        if !s.metrics.is_empty() {
            check(!s.isotropic.is_empty() || !s.anisotropic.is_empty(), || {
                "smoothing needs at least one bandwidth".into()
            })?;
        }
        for job in s.jobs() {
            job.validate()?;
        }
        let v = &self.verify;
        check(!v.t_grid.is_empty() && v.t_grid.iter().all(|t| *t > 0.0), || {
            "verify.t_grid must be non-empty and positive".into()
        })?;
        check(v.family_size >= 2 && v.replicates >= 2 && v.bias_replicates >= 2 && v.mle_replicates >= 2, || {
            "verify sample sizes must be at least 2".into()
        })?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pipeline

/// Noisy data for one seed, before any fitting.
#[derive(Clone, Debug)]
pub enum NoisyInput {
    Dwi(DwiVolume),
    Field { field: TensorField, redraws: usize },
}

/// What the smoothers see: the raw estimate (Euclidean input) and its SPD
/// version (geometric input).
#[derive(Clone, Debug)]
pub struct Estimate {
    pub raw: TensorField,
    pub spd: TensorField,
    pub fitted: Option<FittedVolume>,
    pub diagnostics: EstimateDiagnostics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub non_converged: usize,
    pub non_spd: usize,
    pub clamped_signals: usize,
    pub spectral_redraws: usize,
}

/// A configured experiment with its truth field and masks built once.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: PhantomSpec,
    pub truth: TensorField,
    pub mask: RegionMask,
    pub scheme: Option<GradientScheme>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.phantom.spec()?;
        let truth = build_phantom(&spec)?;
        let mask = region_masks(&spec)?;
        let scheme = match config.noise.model {
            NoiseModel::Rician => Some(config.noise.scheme()?),
            NoiseModel::Spectral => None,
        };
        Ok(Experiment {
            config,
            spec,
            truth,
            mask,
            scheme,
        })
    }

    fn rician_scheme(&self) -> Result<&GradientScheme> {
        self.scheme
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("the spectral model has no gradient scheme".into()))
    }

    pub fn noisy(&self, seed: u64) -> Result<NoisyInput> {
        let rng = RngSpec::new(seed).derive(NOISE_STREAM);
        let n = &self.config.noise;
        match n.model {
            NoiseModel::Rician => {
                let clean = noiseless_dwi(&self.truth, self.rician_scheme()?, n.s0)?;
                Ok(NoisyInput::Dwi(rician_corrupt(&clean, n.sigma, &rng)?))
            }
            NoiseModel::Spectral => {
                let (field, redraws) = spectral_corrupt(&self.truth, n.nu, n.eta, &rng)?;
                Ok(NoisyInput::Field { field, redraws })
            }
        }
    }

    pub fn fit(&self, volume: &DwiVolume) -> Result<FittedVolume> {
        let f = &self.config.fit;
        let sigma = (f.method == FitMethod::Mle).then_some(self.config.noise.sigma);
        fit_volume(volume, self.rician_scheme()?, f.method, sigma, &f.options(), f.max_failure_fraction)
    }

    pub fn estimate(&self, input: NoisyInput) -> Result<Estimate> {
        match input {
            NoisyInput::Dwi(vol) => {
                let fitted = self.fit(&vol)?;
                let spd = if self.config.fit.project {
                    fitted.projected_field()?
                } else {
                    fitted.field.clone()
                };
                Ok(Estimate {
                    raw: fitted.field.clone(),
                    spd,
                    diagnostics: EstimateDiagnostics {
                        non_converged: fitted.non_converged(),
                        non_spd: fitted.non_spd(),
                        clamped_signals: fitted.clamped(),
                        spectral_redraws: 0,
                    },
                    fitted: Some(fitted),
                })
            }
            // Fields read from file may be indefinite fits; spectral draws never are.
            NoisyInput::Field { field, redraws } => {
                let non_spd = field.count_non_spd();
                let spd = if non_spd > 0 && self.config.fit.project {
                    let values = field
                        .values
                        .iter()
                        .map(|v| SpdTensor::new(*v).or_else(|_| project(v)).map(SpdTensor::into_sym))
                        .collect::<Result<_>>()?;
                    TensorField::new(field.grid, values)?
                } else {
                    field.clone()
                };
                Ok(Estimate {
                    raw: field,
                    spd,
                    fitted: None,
                    diagnostics: EstimateDiagnostics {
                        non_spd,
                        spectral_redraws: redraws,
                        ..Default::default()
                    },
                })
            }
        }
    }

    /// Label for the `method` report column.
    pub fn method_name(&self) -> &'static str {
        match self.config.noise.model {
            NoiseModel::Rician => self.config.fit.method.name(),
            NoiseModel::Spectral => "none",
        }
    }

    pub fn smooth(&self, estimate: &Estimate, job: &SmoothingConfig) -> Result<(TensorField, usize)> {
        let input = match job.metric {
            Metric::Euclidean => &estimate.raw,
            _ => &estimate.spd,
        };
        let out = smooth_field(input, job)?;
        Ok((out.field, out.fallbacks))
    }

    fn summarize(&self, field: &TensorField, swelling_input: Option<&TensorField>) -> Result<Vec<RegionRow>> {
        let errors = error_field(&self.truth, field)?;
        let stats = region_summary(&errors.errors, &self.mask)?;
        let swelling = match swelling_input {
            Some(input) => {
                let s = &self.config.swelling;
                swelling_fraction(input, field, &self.mask, s.margin, s.radius)?
            }
            None => Vec::new(),
        };
        Ok(stats
            .into_iter()
            .map(|st| RegionRow {
                region: st.region,
                count: st.count,
                median: st.median,
                mad: st.mad,
                swelling_fraction: swelling.iter().find(|(r, _)| *r == st.region).map(|p| p.1),
            })
            .collect())
    }

    pub fn run_seed(&self, seed: u64) -> Result<SeedReport> {
        let estimate = self.estimate(self.noisy(seed)?)?;
        let baseline = self.summarize(&estimate.raw, None)?;
        let mut smoothed = Vec::new();
        for job in self.config.smoothing.jobs() {
            let (field, fallbacks) = self.smooth(&estimate, &job)?;
            let input = match job.metric {
                Metric::Euclidean => &estimate.raw,
                _ => &estimate.spd,
            };
            smoothed.push(SmoothedSummary {
                metric: job.metric,
                scheme: job.scheme,
                fallbacks,
                regions: self.summarize(&field, Some(input))?,
            });
        }
        Ok(SeedReport {
            seed,
            method: self.method_name().into(),
            diagnostics: estimate.diagnostics,
            baseline,
            smoothed,
        })
    }

    /// Isotropic profiles at the configured reference voxel.
    pub fn weight_profiles(&self) -> Result<Vec<(f64, WeightProfile)>> {
        let s = &self.config.smoothing;
        let grid = self.truth.grid;
        weight_profiles(&grid, self.config.weights.voxel_in(&grid), &s.isotropic, s.threshold, s.window_radius)
    }
}

pub fn weight_profiles(
    grid: &Grid,
    voxel: [usize; 3],
    bandwidths: &[f64],
    threshold: f64,
    window_radius: [usize; 3],
) -> Result<Vec<(f64, WeightProfile)>> {
    if (0..3).any(|k| voxel[k] >= grid.dims[k]) {
        return Err(Error::InvalidInput(format!("voxel {voxel:?} outside grid {:?}", grid.dims)));
    }
    let center = grid.index(voxel[0], voxel[1], voxel[2]);
    bandwidths
        .iter()
        .map(|h| Ok((*h, weight_profile(&iso_weights(grid, center, *h, threshold, window_radius).weights)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: Region,
    pub count: usize,
    pub median: f64,
    pub mad: f64,
    /// Absent for the unsmoothed baseline.
    pub swelling_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedSummary {
    pub metric: Metric,
    pub scheme: Scheme,
    pub fallbacks: usize,
    pub regions: Vec<RegionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub method: String,
    pub diagnostics: EstimateDiagnostics,
    pub baseline: Vec<RegionRow>,
    pub smoothed: Vec<SmoothedSummary>,
}

impl SeedReport {
    pub fn baseline_median(&self, region: Region) -> Option<f64> {
        self.baseline.iter().find(|r| r.region == region).map(|r| r.median)
    }

    pub fn smoothed_median(&self, metric: Metric, scheme: Scheme, region: Region) -> Option<f64> {
        self.smoothed
            .iter()
            .find(|s| s.metric == metric && s.scheme == scheme)?
            .regions
            .iter()
            .find(|r| r.region == region)
            .map(|r| r.median)
    }

    /// Flat rows for the summary CSV; the baseline has metric and scheme `none`.
    pub fn rows(&self) -> Vec<SummaryRow> {
        let base = self.baseline.iter().map(|r| SummaryRow {
            region: r.region.name().into(),
            method: self.method.clone(),
            metric: "none".into(),
            scheme: "none".into(),
            h: String::new(),
            median: r.median,
            mad: r.mad,
            count: r.count,
            swelling_fraction: r.swelling_fraction,
        });
        let smoothed = self.smoothed.iter().flat_map(|s| {
            s.regions.iter().map(|r| SummaryRow {
                region: r.region.name().into(),
                method: self.method.clone(),
                metric: s.metric.name().into(),
                scheme: s.scheme.name().into(),
                h: s.scheme.label(),
                median: r.median,
                mad: r.mad,
                count: r.count,
                swelling_fraction: r.swelling_fraction,
            })
        });
        base.chain(smoothed).collect()
    }

    /// Long-format plot series: bandwidth against median error per region,
    /// one series per smoother. Anisotropic series are keyed by their
    /// first-stage bandwidth and plotted against the second.
    pub fn plot_rows(&self) -> Vec<PlotRow> {
        let mut rows = Vec::new();
        for s in &self.smoothed {
            let (series, h) = match s.scheme {
                Scheme::Isotropic { h } => (format!("{}_isotropic", s.metric.name()), h),
                Scheme::Anisotropic { h_iso, h_aniso } => {
                    (format!("{}_anisotropic_h1={h_iso}", s.metric.name()), h_aniso)
                }
            };
            for r in &s.regions {
                rows.push(PlotRow {
                    region: r.region.name().into(),
                    series: series.clone(),
                    h,
                    median: r.median,
                });
            }
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub region: String,
    pub method: String,
    pub metric: String,
    pub scheme: String,
    pub h: String,
    pub median: f64,
    pub mad: f64,
    pub count: usize,
    pub swelling_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotRow {
    pub region: String,
    pub series: String,
    pub h: f64,
    pub median: f64,
}
