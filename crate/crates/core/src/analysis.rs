//! Error fields, region summaries and swelling diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{Grid, RegionLabel, RegionMask, TensorField};
use crate::regression::project;
use crate::smoothing::median_sorted;
use crate::spd::{affine_distance, SpdTensor};

/// Neighborhood half-widths used for the swelling reference determinant.
pub const SWELLING_RADIUS: [usize; 3] = [2, 2, 1];
pub const DEFAULT_SWELLING_MARGIN: f64 = 0.01;

/// A summary region: the whole field, one of the two super-regions, or a
/// single mask label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Region {
    Whole,
    Bands,
    Background,
    Label(RegionLabel),
}

impl Region {
    pub const ALL: [Region; 8] = [
        Region::Whole,
        Region::Bands,
        Region::Background,
        Region::Label(RegionLabel::BandsInterior),
        Region::Label(RegionLabel::BandsBoundary),
        Region::Label(RegionLabel::BandsCrossing),
        Region::Label(RegionLabel::BackgroundInterior),
        Region::Label(RegionLabel::BackgroundBoundary),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Bands => "bands",
            Region::Background => "background",
            Region::Label(l) => l.name(),
        }
    }

    pub fn from_name(s: &str) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn contains(&self, label: RegionLabel) -> bool {
        match self {
            Region::Whole => true,
            Region::Bands => label.is_band(),
            Region::Background => !label.is_band(),
            Region::Label(l) => *l == label,
        }
    }
}

impl From<Region> for String {
    fn from(r: Region) -> String {
        r.name().into()
    }
}

impl TryFrom<String> for Region {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Region, String> {
        Region::from_name(&s).ok_or_else(|| format!("unknown region `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorField {
    pub errors: Vec<f64>,
    /// Estimate voxels that had to be projected before measuring.
    pub projected: usize,
}

/// Affine-invariant distance per voxel. Indefinite estimate voxels are
/// projected first and counted.
pub fn error_field(truth: &TensorField, estimate: &TensorField) -> Result<ErrorField> {
    if truth.grid != estimate.grid {
        return Err(Error::InvalidInput("truth and estimate live on different grids".into()));
    }
    let truth = truth.to_spd()?;
    let pairs: Vec<(f64, bool)> = truth
        .par_iter()
        .zip(&estimate.values)
        .map(|(t, e)| {
            let (e, projected) = match SpdTensor::new(*e) {
                Ok(e) => (e, false),
                Err(_) => (project(e)?, true),
            };
            Ok((affine_distance(t, &e), projected))
        })
        .collect::<Result<_>>()?;
    Ok(ErrorField {
        projected: pairs.iter().filter(|p| p.1).count(),
        errors: pairs.into_iter().map(|p| p.0).collect(),
    })
}

/// Median and median absolute deviation (no consistency factor).
pub fn median_mad(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let med = median_sorted(&v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Ok((med, median_sorted(&dev)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: Region,
    pub count: usize,
    pub median: f64,
    pub mad: f64,
}

/// Median/MAD per region in [`Region::ALL`] order; empty regions are skipped.
pub fn region_summary(errors: &[f64], mask: &RegionMask) -> Result<Vec<RegionStats>> {
    if errors.len() != mask.labels.len() {
        return Err(Error::DimensionMismatch {
            left: mask.labels.len(),
            right: errors.len(),
        });
    }
    let mut out = Vec::new();
    for region in Region::ALL {
        let vals: Vec<f64> = errors
            .iter()
            .zip(&mask.labels)
            .filter(|(_, l)| region.contains(**l))
            .map(|(e, _)| *e)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let (median, mad) = median_mad(&vals)?;
        out.push(RegionStats {
            region,
            count: vals.len(),
            median,
            mad,
        });
    }
    Ok(out)
}

fn neighborhood_max(grid: &Grid, values: &[f64], center: usize, radius: [usize; 3]) -> f64 {
    let c = grid.coords(center);
    let lo: [usize; 3] = std::array::from_fn(|k| c[k].saturating_sub(radius[k]));
    let hi: [usize; 3] = std::array::from_fn(|k| (c[k] + radius[k]).min(grid.dims[k] - 1));
    let mut m = f64::NEG_INFINITY;
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                m = m.max(values[grid.index(x, y, z)]);
            }
        }
    }
    m
}

/// `det(output) / max det(input)` over a box around each voxel.
pub fn determinant_ratio(input: &TensorField, output: &TensorField, radius: [usize; 3]) -> Result<Vec<f64>> {
    if input.grid != output.grid {
        return Err(Error::InvalidInput("fields live on different grids".into()));
    }
    let din: Vec<f64> = input.values.iter().map(|v| v.det()).collect::<Result<_>>()?;
    let dout: Vec<f64> = output.values.iter().map(|v| v.det()).collect::<Result<_>>()?;
    Ok((0..din.len())
        .into_par_iter()
        .map(|i| dout[i] / neighborhood_max(&input.grid, &din, i, radius))
        .collect())
}

/// Per region, the fraction of voxels with
/// `det(output) > (1 + margin) * max det(input)` over the box around the voxel.
pub fn swelling_fraction(
    input: &TensorField,
    output: &TensorField,
    mask: &RegionMask,
    margin: f64,
    radius: [usize; 3],
) -> Result<Vec<(Region, f64)>> {
    if mask.grid != input.grid {
        return Err(Error::InvalidInput("mask and field live on different grids".into()));
    }
    let ratio = determinant_ratio(input, output, radius)?;
    // A non-positive reference determinant only occurs for indefinite inputs.
    let swollen: Vec<bool> = ratio.iter().map(|r| *r > 1.0 + margin).collect();
    let mut out = Vec::new();
    for region in Region::ALL {
        let (mut n, mut k) = (0usize, 0usize);
        for (s, l) in swollen.iter().zip(&mask.labels) {
            if region.contains(*l) {
                n += 1;
                k += *s as usize;
            }
        }
        if n > 0 {
            out.push((region, k as f64 / n as f64));
        }
    }
    Ok(out)
}
