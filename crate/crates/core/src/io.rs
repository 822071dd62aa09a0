//! Text file formats for fields, masks, signals and reports.
//!
//! Every writer takes an optional [`Provenance`] that is emitted as a
//! leading `#` comment line; readers skip comment lines.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{DwiVolume, GradientScheme};
use crate::experiment::{PlotRow, SummaryRow};
use crate::perturbation::OrderRow;
use crate::phantom::{Band, BandLayout, Grid, RegionLabel, RegionMask, TensorField};
use crate::regression::FittedVolume;
use crate::smoothing::WeightProfile;
use crate::spd::SymMatrix;

pub const FIELD_HEADER: [&str; 9] = ["x", "y", "z", "dxx", "dyy", "dzz", "dxy", "dxz", "dyz"];
pub const MASK_HEADER: [&str; 4] = ["x", "y", "z", "label"];
pub const DWI_HEADER: [&str; 6] = ["x", "y", "z", "dir_index", "repeat", "signal"];
pub const SCHEME_HEADER: [&str; 3] = ["bx", "by", "bz"];
pub const DIAGNOSTICS_HEADER: [&str; 9] = [
    "x",
    "y",
    "z",
    "method",
    "converged",
    "iterations",
    "residual",
    "spd",
    "clamped_signals",
];
pub const WEIGHT_PROFILE_HEADER: [&str; 7] = ["h", "size", "n99", "min", "median", "max", "entropy"];
pub const BAND_TABLE_HEADER: [&str; 7] = ["layout", "orientation", "lo", "hi", "dxx", "dyy", "dzz"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "region",
    "method",
    "metric",
    "scheme",
    "h",
    "median",
    "mad",
    "count",
    "swelling_fraction",
];
pub const PLOT_HEADER: [&str; 4] = ["region", "series", "h", "median"];
pub const VERIFY_HEADER: [&str; 8] = [
    "proposition",
    "case",
    "base",
    "style",
    "t",
    "residual",
    "ratio_vs_half_t",
    "pass",
];

/// Config hash and master seed stamped on every output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// 17 significant digits, enough to round-trip any double.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

/// Shortest representation that round-trips.
pub fn fmt_short(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn writer<W: Write>(mut w: W, prov: Option<&Provenance>, header: &[&str]) -> Result<csv::Writer<W>> {
    if let Some(p) = prov {
        writeln!(w, "{}", p.comment())?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

fn reader<R: Read>(r: R, header: &[&str]) -> Result<csv::Reader<R>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let got = rd.headers()?;
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::InvalidInput(format!(
            "expected header `{}`, found `{}`",
            header.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(rd)
}

/// Read the provenance comment, if the first line carries one.
pub fn read_provenance(text: &str) -> Option<Provenance> {
    let line = text.lines().next()?.strip_prefix("# ")?;
    let mut hash = None;
    let mut seed = None;
    for part in line.split_whitespace() {
        if let Some(v) = part.strip_prefix("config_hash=") {
            hash = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    Some(Provenance {
        config_hash: hash?,
        seed: seed?,
    })
}

fn xyz(grid: &Grid, i: usize) -> [String; 3] {
    grid.coords(i).map(|c| c.to_string())
}

/// Rows must be complete and x-fastest; returns the grid they span.
fn infer_grid(coords: &[[usize; 3]], spacing: [f64; 3]) -> Result<Grid> {
    let last = coords.last().ok_or(Error::InvalidInput("file has no rows".into()))?;
    let grid = Grid::new([last[0] + 1, last[1] + 1, last[2] + 1], spacing)?;
    if grid.len() != coords.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows for a {:?} grid",
            coords.len(),
            grid.dims
        )));
    }
    for (i, c) in coords.iter().enumerate() {
        if *c != grid.coords(i) {
            return Err(Error::InvalidInput(format!(
                "row {} has coordinates {c:?}, expected {:?} (x-fastest order)",
                i + 1,
                grid.coords(i)
            )));
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Tensor fields and masks

pub fn write_field<W: Write>(w: W, field: &TensorField, prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &FIELD_HEADER)?;
    for (i, v) in field.values.iter().enumerate() {
        let [x, y, z] = xyz(&field.grid, i);
        let mut rec = vec![x, y, z];
        rec.extend(v.to_tensor_vec().iter().map(|c| fmt_exact(*c)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct FieldRow {
    x: usize,
    y: usize,
    z: usize,
    dxx: f64,
    dyy: f64,
    dzz: f64,
    dxy: f64,
    dxz: f64,
    dyz: f64,
}

/// The file carries voxel indices only; the physical spacing is supplied.
pub fn read_field<R: Read>(r: R, spacing: [f64; 3]) -> Result<TensorField> {
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for row in reader(r, &FIELD_HEADER)?.deserialize() {
        let row: FieldRow = row?;
        coords.push([row.x, row.y, row.z]);
        values.push(SymMatrix::from_tensor_vec(&[row.dxx, row.dyy, row.dzz, row.dxy, row.dxz, row.dyz]));
    }
    let grid = infer_grid(&coords, spacing)?;
    TensorField::new(grid, values)
}

pub fn write_mask<W: Write>(w: W, mask: &RegionMask, prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &MASK_HEADER)?;
    for (i, l) in mask.labels.iter().enumerate() {
        let [x, y, z] = xyz(&mask.grid, i);
        out.write_record([x, y, z, l.name().to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct MaskRow {
    x: usize,
    y: usize,
    z: usize,
    label: String,
}

pub fn read_mask<R: Read>(r: R, spacing: [f64; 3]) -> Result<RegionMask> {
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for row in reader(r, &MASK_HEADER)?.deserialize() {
        let row: MaskRow = row?;
        coords.push([row.x, row.y, row.z]);
        labels.push(
            RegionLabel::from_name(&row.label)
                .ok_or_else(|| Error::InvalidInput(format!("unknown region label `{}`", row.label)))?,
        );
    }
    let grid = infer_grid(&coords, spacing)?;
    Ok(RegionMask { grid, labels })
}

#[derive(Deserialize)]
struct BandRow {
    layout: usize,
    orientation: String,
    lo: usize,
    hi: usize,
    dxx: f64,
    dyy: f64,
    dzz: f64,
}

/// Band layouts from a table; layout indices must be contiguous from 0.
pub fn read_band_table<R: Read>(r: R) -> Result<Vec<BandLayout>> {
    let mut layouts: Vec<BandLayout> = Vec::new();
    for row in reader(r, &BAND_TABLE_HEADER)?.deserialize() {
        let row: BandRow = row?;
        if row.layout > layouts.len() {
            return Err(Error::InvalidInput(format!("band table skips layout {}", layouts.len())));
        }
        if row.layout == layouts.len() {
            layouts.push(BandLayout::default());
        }
        let band = Band {
            lo: row.lo,
            hi: row.hi,
            diag: [row.dxx, row.dyy, row.dzz],
        };
        match row.orientation.as_str() {
            "horizontal" => layouts[row.layout].horizontal.push(band),
            "vertical" => layouts[row.layout].vertical.push(band),
            other => return Err(Error::InvalidInput(format!("unknown band orientation `{other}`"))),
        }
    }
    if layouts.is_empty() {
        return Err(Error::InvalidInput("band table is empty".into()));
    }
    Ok(layouts)
}

// ---------------------------------------------------------------------------
// Signals and gradient schemes

pub fn write_dwi<W: Write>(
    w: W,
    volume: &DwiVolume,
    scheme: &GradientScheme,
    prov: Option<&Provenance>,
) -> Result<()> {
    if scheme.n_measurements() != volume.n_measurements {
        return Err(Error::DimensionMismatch {
            left: scheme.n_measurements(),
            right: volume.n_measurements,
        });
    }
    let mut out = writer(w, prov, &DWI_HEADER)?;
    for i in 0..volume.grid.len() {
        let [x, y, z] = xyz(&volume.grid, i);
        for (m, s) in volume.voxel(i).iter().enumerate() {
            let (dir, rep) = scheme.measurement(m);
            out.write_record([x.clone(), y.clone(), z.clone(), dir.to_string(), rep.to_string(), fmt_exact(*s)])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct DwiRow {
    x: usize,
    y: usize,
    z: usize,
    dir_index: usize,
    repeat: usize,
    signal: f64,
}

/// Measurements must appear in the scheme's order within each voxel.
pub fn read_dwi<R: Read>(r: R, spacing: [f64; 3], scheme: &GradientScheme, s0: f64) -> Result<DwiVolume> {
    let n = scheme.n_measurements();
    let mut coords = Vec::new();
    let mut signals = Vec::new();
    for (k, row) in reader(r, &DWI_HEADER)?.deserialize().enumerate() {
        let row: DwiRow = row?;
        let m = k % n;
        if (row.dir_index, row.repeat) != scheme.measurement(m) {
            return Err(Error::InvalidInput(format!(
                "row {}: measurement ({}, {}) out of scheme order",
                k + 1,
                row.dir_index,
                row.repeat
            )));
        }
        if m == 0 {
            coords.push([row.x, row.y, row.z]);
        } else if coords.last() != Some(&[row.x, row.y, row.z]) {
            return Err(Error::InvalidInput(format!("row {}: voxel changed mid-block", k + 1)));
        }
        signals.push(row.signal);
    }
    if signals.len() % n != 0 {
        return Err(Error::InvalidInput("incomplete final voxel block".into()));
    }
    let grid = infer_grid(&coords, spacing)?;
    Ok(DwiVolume {
        grid,
        s0,
        n_measurements: n,
        signals,
    })
}

pub fn write_scheme<W: Write>(w: W, directions: &[[f64; 3]], prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &SCHEME_HEADER)?;
    for b in directions {
        out.write_record(b.map(fmt_exact))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scheme<R: Read>(r: R) -> Result<Vec<[f64; 3]>> {
    reader(r, &SCHEME_HEADER)?
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Fit diagnostics, weight profiles, verification rows

pub fn write_diagnostics<W: Write>(w: W, fitted: &FittedVolume, prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &DIAGNOSTICS_HEADER)?;
    for (i, r) in fitted.reports.iter().enumerate() {
        let [x, y, z] = xyz(&fitted.field.grid, i);
        out.write_record([
            x,
            y,
            z,
            fitted.method.name().to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            fmt_exact(r.residual),
            r.spd.to_string(),
            r.clamped.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_weight_profiles<W: Write>(
    w: W,
    rows: &[(f64, WeightProfile)],
    prov: Option<&Provenance>,
) -> Result<()> {
    let mut out = writer(w, prov, &WEIGHT_PROFILE_HEADER)?;
    for (h, p) in rows {
        out.write_record([
            fmt_short(*h),
            p.size.to_string(),
            p.n99.to_string(),
            fmt_exact(p.min),
            fmt_exact(p.median),
            fmt_exact(p.max),
            fmt_exact(p.entropy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const BANDS_NOTE: &str = "# region bands = bands_interior + bands_boundary + bands_crossing";

/// Flat summary table; a second comment line records what `bands` covers.
pub fn write_summary<W: Write>(mut w: W, rows: &[SummaryRow], prov: Option<&Provenance>) -> Result<()> {
    if let Some(p) = prov {
        writeln!(w, "{}", p.comment())?;
    }
    writeln!(w, "{BANDS_NOTE}")?;
    let mut out = writer(w, None, &SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.region.clone(),
            r.method.clone(),
            r.metric.clone(),
            r.scheme.clone(),
            r.h.clone(),
            fmt_exact(r.median),
            fmt_exact(r.mad),
            r.count.to_string(),
            r.swelling_fraction.map(fmt_exact).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_plot_data<W: Write>(w: W, rows: &[PlotRow], prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &PLOT_HEADER)?;
    for r in rows {
        out.write_record([r.region.clone(), r.series.clone(), fmt_short(r.h), fmt_exact(r.median)])?;
    }
    out.flush()?;
    Ok(())
}

/// One line of a verification report. Suites other than the perturbation
/// order checks reuse the columns: `t` holds the suite's scale parameter
/// and `ratio_vs_half_t` is left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub proposition: String,
    pub case: String,
    pub base: String,
    pub style: String,
    pub t: f64,
    pub residual: f64,
    pub ratio_vs_half_t: Option<f64>,
    pub pass: bool,
}

impl From<&OrderRow> for VerifyRow {
    fn from(r: &OrderRow) -> Self {
        VerifyRow {
            proposition: r.proposition.name().into(),
            case: r.case.name().into(),
            base: r.base.clone(),
            style: r.style.name().into(),
            t: r.t,
            residual: r.residual,
            ratio_vs_half_t: Some(r.ratio_vs_half_t),
            pass: r.pass,
        }
    }
}

pub fn write_verification<W: Write>(w: W, rows: &[VerifyRow], prov: Option<&Provenance>) -> Result<()> {
    let mut out = writer(w, prov, &VERIFY_HEADER)?;
    for r in rows {
        out.write_record([
            r.proposition.clone(),
            r.case.clone(),
            r.base.clone(),
            r.style.clone(),
            fmt_short(r.t),
            fmt_exact(r.residual),
            r.ratio_vs_half_t.map(fmt_exact).unwrap_or_default(),
            r.pass.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_verification<R: Read>(r: R) -> Result<Vec<VerifyRow>> {
    reader(r, &VERIFY_HEADER)?
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{default_scheme, noiseless_dwi, rician_corrupt, DEFAULT_DIRECTIONS};
    use crate::phantom::{build_phantom, region_masks, PhantomSpec};
    use crate::regression::{fit_volume, FitMethod, FitOptions};
    use crate::rng::RngSpec;

    fn toy() -> (PhantomSpec, TensorField) {
        let spec = PhantomSpec::crossing_toy();
        let f = build_phantom(&spec).unwrap();
        (spec, f)
    }

    #[test]
    fn field_roundtrip_is_exact() {
        let (spec, f) = toy();
        // Perturb so the values need all 17 digits.
        let vals = f
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut v = *v;
                v.set(0, 1, (i as f64 * 0.1).sin() / 3.0);
                v.scale(1.0 + 1e-13 * i as f64)
            })
            .collect();
        let f = TensorField::new(f.grid, vals).unwrap();
        let mut buf = Vec::new();
        let prov = Provenance {
            config_hash: "abc123".into(),
            seed: 7,
        };
        write_field(&mut buf, &f, Some(&prov)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(read_provenance(&text), Some(prov));
        assert_eq!(text.lines().nth(1).unwrap(), FIELD_HEADER.join(","));
        assert_eq!(text.lines().count(), 2 + 24 * 24);
        let back = read_field(text.as_bytes(), spec.grid.spacing).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn field_rows_are_x_fastest() {
        let (_, f) = toy();
        let mut buf = Vec::new();
        write_field(&mut buf, &f, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).take(3).collect();
        assert!(rows[0].starts_with("0,0,0,"));
        assert!(rows[1].starts_with("1,0,0,"));
        assert!(rows[2].starts_with("2,0,0,"));
        // Row (x=8, y=3): vertical band tensor diag(16, 0.25, 0.25).
        let row = text.lines().nth(1 + 3 * 24 + 8).unwrap();
        assert_eq!(
            row,
            "8,3,0,1.6000000000000000e1,2.5000000000000000e-1,2.5000000000000000e-1,\
             0.0000000000000000e0,0.0000000000000000e0,0.0000000000000000e0"
        );
    }

    #[test]
    fn malformed_fields_are_rejected() {
        let bad_header = "x,y,z,dxx\n0,0,0,1\n";
        assert!(read_field(bad_header.as_bytes(), [1.0; 3]).is_err());
        let h = FIELD_HEADER.join(",");
        let out_of_order = format!("{h}\n1,0,0,1,1,1,0,0,0\n0,0,0,1,1,1,0,0,0\n");
        assert!(read_field(out_of_order.as_bytes(), [1.0; 3]).is_err());
        let missing = format!("{h}\n0,0,0,1,1,1,0,0,0\n1,0,0,1,1,1,0,0,0\n0,1,0,1,1,1,0,0,0\n");
        assert!(read_field(missing.as_bytes(), [1.0; 3]).is_err());
        assert!(read_field(format!("{h}\n").as_bytes(), [1.0; 3]).is_err());
    }

    #[test]
    fn mask_roundtrip() {
        let (spec, _) = toy();
        let mask = region_masks(&spec).unwrap();
        let mut buf = Vec::new();
        write_mask(&mut buf, &mask, None).unwrap();
        let back = read_mask(buf.as_slice(), spec.grid.spacing).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn dwi_and_scheme_roundtrip() {
        let (spec, f) = toy();
        let scheme = default_scheme(2).unwrap();
        let clean = noiseless_dwi(&f, &scheme, 10.0).unwrap();
        let noisy = rician_corrupt(&clean, 0.3, &RngSpec::new(5)).unwrap();
        let mut buf = Vec::new();
        write_dwi(&mut buf, &noisy, &scheme, None).unwrap();
        let back = read_dwi(buf.as_slice(), spec.grid.spacing, &scheme, 10.0).unwrap();
        assert_eq!(back, noisy);
        // The wrong repeat count breaks measurement order.
        assert!(read_dwi(buf.as_slice(), spec.grid.spacing, &default_scheme(1).unwrap(), 10.0).is_err());

        let mut buf = Vec::new();
        write_scheme(&mut buf, &DEFAULT_DIRECTIONS, None).unwrap();
        assert_eq!(read_scheme(buf.as_slice()).unwrap(), DEFAULT_DIRECTIONS.to_vec());
    }

    #[test]
    fn diagnostics_rows() {
        let (_, f) = toy();
        let scheme = default_scheme(2).unwrap();
        let vol = noiseless_dwi(&f, &scheme, 10.0).unwrap();
        let fitted = fit_volume(&vol, &scheme, FitMethod::Linear, None, &FitOptions::default(), 0.0).unwrap();
        let mut buf = Vec::new();
        write_diagnostics(&mut buf, &fitted, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 24 * 24);
        let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(&first[..6], &["0", "0", "0", "linear", "true", "0"]);
        assert_eq!(first[7], "true");
        assert_eq!(first[8], "0");
    }

    #[test]
    fn band_table_reproduces_the_builtin_layouts() {
        use crate::phantom::PhantomSpec;
        let spec = PhantomSpec::standard();
        let mut text = BAND_TABLE_HEADER.join(",") + "\n";
        for (k, layout) in spec.layouts.iter().enumerate() {
            for (name, bands) in [("horizontal", &layout.horizontal), ("vertical", &layout.vertical)] {
                for b in bands {
                    let [a, c, d] = b.diag;
                    text += &format!("{k},{name},{},{},{a},{c},{d}\n", b.lo, b.hi);
                }
            }
        }
        assert_eq!(read_band_table(text.as_bytes()).unwrap(), spec.layouts);
        let skip = BAND_TABLE_HEADER.join(",") + "\n1,vertical,0,3,1,1,1\n";
        assert!(read_band_table(skip.as_bytes()).is_err());
        let bad = BAND_TABLE_HEADER.join(",") + "\n0,diagonal,0,3,1,1,1\n";
        assert!(read_band_table(bad.as_bytes()).is_err());
    }

    #[test]
    fn verification_roundtrip_keeps_empty_ratio() {
        let rows = vec![
            VerifyRow {
                proposition: "affine_log".into(),
                case: "distinct".into(),
                base: "diag(3,2,1)".into(),
                style: "multiplicative".into(),
                t: 0.05,
                residual: 1.25e-7,
                ratio_vs_half_t: Some(8.1),
                pass: true,
            },
            VerifyRow {
                proposition: "fisher_limit".into(),
                case: "w=50".into(),
                base: "-".into(),
                style: "quadrature".into(),
                t: 50.0,
                residual: 2e-4,
                ratio_vs_half_t: None,
                pass: false,
            },
        ];
        let mut buf = Vec::new();
        write_verification(&mut buf, &rows, None).unwrap();
        assert_eq!(read_verification(buf.as_slice()).unwrap(), rows);
    }
}
