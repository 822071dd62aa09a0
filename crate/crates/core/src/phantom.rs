//! Voxel grids, tensor fields and the crossing-band phantom.
//!
//! Voxels are linearized x-fastest: `index = x + nx * (y + ny * z)`.
//! A "horizontal" band is a range of rows (y indices) running along x; a
//! "vertical" band is a range of columns (x indices). Where two bands
//! cross, the horizontal band's tensor is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::{SpdTensor, SymMatrix};

/// Distance (in voxels, in-plane Chebyshev) that separates interior from
/// boundary voxels in the region masks.
pub const INTERIOR_DISTANCE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Physical voxel spacing along x, y, z.
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("grid dimensions must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {spacing:?}")));
        }
        Ok(Grid { dims, spacing })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let r = index / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn position(&self, index: usize) -> [f64; 3] {
        let c = self.coords(index);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }
}

/// A field of symmetric 3x3 tensors on a grid. Noise-free and smoothed
/// fields are SPD everywhere; fitted fields may contain indefinite voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    pub values: Vec<SymMatrix>,
}

impl TensorField {
    pub fn new(grid: Grid, values: Vec<SymMatrix>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        Ok(TensorField { grid, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> &SymMatrix {
        &self.values[self.grid.index(x, y, z)]
    }

    /// Every voxel as an SPD tensor, or the first offending voxel.
    pub fn to_spd(&self) -> Result<Vec<SpdTensor>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                SpdTensor::new(*v).map_err(|_| {
                    let [x, y, z] = self.grid.coords(i);
                    Error::NonSpdVoxel { index: i, x, y, z }
                })
            })
            .collect()
    }

    pub fn count_non_spd(&self) -> usize {
        self.values.iter().filter(|v| SpdTensor::new(**v).is_err()).count()
    }
}

// ---------------------------------------------------------------------------
// Band layouts

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// First index covered (inclusive).
    pub lo: usize,
    /// Last index covered (inclusive).
    pub hi: usize,
    /// Diagonal of the band tensor.
    pub diag: [f64; 3],
}

impl Band {
    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        (self.lo..=self.hi).contains(&i)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandLayout {
    /// Row ranges (y indices).
    pub horizontal: Vec<Band>,
    /// Column ranges (x indices).
    pub vertical: Vec<Band>,
}

impl BandLayout {
    fn horizontal_at(&self, y: usize) -> Option<&Band> {
        self.horizontal.iter().find(|b| b.contains(y))
    }

    fn vertical_at(&self, x: usize) -> Option<&Band> {
        self.vertical.iter().find(|b| b.contains(x))
    }

    pub fn is_band(&self, x: usize, y: usize) -> bool {
        self.horizontal_at(y).is_some() || self.vertical_at(x).is_some()
    }

    pub fn is_crossing(&self, x: usize, y: usize) -> bool {
        self.horizontal_at(y).is_some() && self.vertical_at(x).is_some()
    }

    pub fn diag_at(&self, x: usize, y: usize) -> Option<[f64; 3]> {
        self.horizontal_at(y)
            .or_else(|| self.vertical_at(x))
            .map(|b| b.diag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid,
    pub background: [f64; 3],
    pub layouts: Vec<BandLayout>,
    /// Layout index for every slice.
    pub slice_layout: Vec<usize>,
}

impl PhantomSpec {
    /// The 128 x 128 x 4 crossing-band phantom. Slices 0-1 share one band
    /// layout and slices 2-3 another.
    pub fn standard() -> Self {
        let band = |lo, hi, diag| Band { lo, hi, diag };
        let a = [0.25, 16.0, 0.25];
        let b = [0.5, 4.0, 0.5];
        let c = [0.7, 2.0, 0.7];
        let first = BandLayout {
            horizontal: vec![band(20, 35, a), band(60, 75, b), band(90, 105, c)],
            vertical: vec![
                band(20, 35, [16.0, 0.25, 0.25]),
                band(60, 75, [4.0, 0.5, 0.5]),
                band(90, 105, [2.0, 0.7, 0.7]),
            ],
        };
        let second = BandLayout {
            horizontal: vec![band(40, 50, a), band(80, 90, b), band(110, 120, c)],
            vertical: vec![band(40, 50, a), band(80, 90, b), band(110, 120, c)],
        };
        PhantomSpec {
            grid: Grid {
                dims: [128, 128, 4],
                spacing: [0.01875, 0.01875, 0.05],
            },
            background: [1.0, 1.0, 1.0],
            layouts: vec![first, second],
            slice_layout: vec![0, 0, 1, 1],
        }
    }

    /// Two unit-determinant bands crossing on a single slice, identity
    /// background. Used to exhibit determinant swelling.
    pub fn crossing_toy() -> Self {
        let layout = BandLayout {
            horizontal: vec![Band {
                lo: 8,
                hi: 15,
                diag: [0.25, 16.0, 0.25],
            }],
            vertical: vec![Band {
                lo: 8,
                hi: 15,
                diag: [16.0, 0.25, 0.25],
            }],
        };
        PhantomSpec {
            grid: Grid {
                dims: [24, 24, 1],
                spacing: [0.01875, 0.01875, 0.05],
            },
            background: [1.0, 1.0, 1.0],
            layouts: vec![layout],
            slice_layout: vec![0],
        }
    }

    /// Reorient every vertical band so its largest diffusivity lies along x.
    pub fn with_x_oriented_vertical_bands(mut self) -> Self {
        for layout in &mut self.layouts {
            for band in &mut layout.vertical {
                let d = band.diag;
                let max_in_plane = d[0].max(d[1]);
                let min_in_plane = d[0].min(d[1]);
                band.diag = [max_in_plane, min_in_plane, d[2]];
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.dims, self.grid.spacing)?;
        if self.slice_layout.len() != self.grid.dims[2] {
            return Err(Error::InvalidInput(format!(
                "{} slice layout entries for {} slices",
                self.slice_layout.len(),
                self.grid.dims[2]
            )));
        }
        if let Some(k) = self.slice_layout.iter().find(|k| **k >= self.layouts.len()) {
            return Err(Error::InvalidInput(format!("slice layout index {k} out of range")));
        }
        let diag_ok = |d: &[f64; 3]| d.iter().all(|v| v.is_finite() && *v > 0.0);
        if !diag_ok(&self.background) {
            return Err(Error::InvalidInput("background tensor must be positive".into()));
        }
        for layout in &self.layouts {
            for (band, limit) in layout
                .horizontal
                .iter()
                .map(|b| (b, self.grid.dims[1]))
                .chain(layout.vertical.iter().map(|b| (b, self.grid.dims[0])))
            {
                if band.lo > band.hi || band.hi >= limit {
                    return Err(Error::InvalidInput(format!(
                        "band {}..={} does not fit in 0..{limit}",
                        band.lo, band.hi
                    )));
                }
                if !diag_ok(&band.diag) {
                    return Err(Error::InvalidInput("band tensors must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn layout_for_slice(&self, z: usize) -> &BandLayout {
        &self.layouts[self.slice_layout[z]]
    }
}

pub fn build_phantom(spec: &PhantomSpec) -> Result<TensorField> {
    spec.validate()?;
    let g = spec.grid;
    let mut values = Vec::with_capacity(g.len());
    for z in 0..g.dims[2] {
        let layout = spec.layout_for_slice(z);
        for y in 0..g.dims[1] {
            for x in 0..g.dims[0] {
                let d = layout.diag_at(x, y).unwrap_or(spec.background);
                values.push(SymMatrix::from_diag(&d));
            }
        }
    }
    TensorField::new(g, values)
}

// ---------------------------------------------------------------------------
// Region masks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    BandsInterior,
    BandsBoundary,
    BandsCrossing,
    BackgroundInterior,
    BackgroundBoundary,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 5] = [
        RegionLabel::BandsInterior,
        RegionLabel::BandsBoundary,
        RegionLabel::BandsCrossing,
        RegionLabel::BackgroundInterior,
        RegionLabel::BackgroundBoundary,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RegionLabel::BandsInterior => "bands_interior",
            RegionLabel::BandsBoundary => "bands_boundary",
            RegionLabel::BandsCrossing => "bands_crossing",
            RegionLabel::BackgroundInterior => "background_interior",
            RegionLabel::BackgroundBoundary => "background_boundary",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    pub fn is_band(&self) -> bool {
        matches!(
            self,
            RegionLabel::BandsInterior | RegionLabel::BandsBoundary | RegionLabel::BandsCrossing
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub grid: Grid,
    pub labels: Vec<RegionLabel>,
}

impl RegionMask {
    pub fn count(&self, label: RegionLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// In-plane Chebyshev distance from `(x, y)` to the nearest voxel whose
/// band membership differs, capped at `cap + 1`.
fn distance_to_other_side(layout: &BandLayout, nx: usize, ny: usize, x: usize, y: usize, cap: usize) -> usize {
    let inside = layout.is_band(x, y);
    for r in 1..=cap {
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + r).min(nx - 1);
        let y1 = (y + r).min(ny - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                // Only the ring at distance exactly r is new.
                if xx.abs_diff(x).max(yy.abs_diff(y)) != r {
                    continue;
                }
                if layout.is_band(xx, yy) != inside {
                    return r;
                }
            }
        }
    }
    cap + 1
}

/// Label every voxel:
///
/// * `bands_crossing`: band-band crossings plus band voxels touching the
///   background (the one-voxel interface ring),
/// * `bands_interior` / `bands_boundary`: other band voxels at distance
///   at least / below [`INTERIOR_DISTANCE`] from the background,
/// * `background_interior` / `background_boundary`: background voxels at
///   distance at least / below [`INTERIOR_DISTANCE`] from any band.
pub fn region_masks(spec: &PhantomSpec) -> Result<RegionMask> {
    spec.validate()?;
    let g = spec.grid;
    let [nx, ny, nz] = g.dims;
    let mut labels = Vec::with_capacity(g.len());
    for z in 0..nz {
        let layout = spec.layout_for_slice(z);
        for y in 0..ny {
            for x in 0..nx {
                let d = distance_to_other_side(layout, nx, ny, x, y, INTERIOR_DISTANCE);
                let label = if layout.is_band(x, y) {
                    if layout.is_crossing(x, y) || d == 1 {
                        RegionLabel::BandsCrossing
                    } else if d >= INTERIOR_DISTANCE {
                        RegionLabel::BandsInterior
                    } else {
                        RegionLabel::BandsBoundary
                    }
                } else if d >= INTERIOR_DISTANCE {
                    RegionLabel::BackgroundInterior
                } else {
                    RegionLabel::BackgroundBoundary
                };
                labels.push(label);
            }
        }
    }
    Ok(RegionMask { grid: g, labels })
}
