//! Weight grids proxying the spatial distribution of economic activity.
//!
//! Population weights are density times spherical cell area (a head count).
//! Night-light weights come from a 30 arc-second radiance product that is
//! block-averaged down to the climate resolution, corrected for aurora noise
//! at high latitudes and, for center-registered climate grids, resampled by
//! half a cell.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    read_archive, write_archive, ArchiveOptions, Encoding, Frequency, GridSpec, Raster, RasterSeries, Registration,
    Timestamp, Variable,
};
use crate::sum::NeumaierSum;

/// Base years for which weight grids are published.
pub const BASE_YEARS: [i32; 4] = [2000, 2005, 2010, 2015];

/// Default aurora-correction latitude, degrees.
pub const AURORA_LAT_CUT: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Unweighted,
    Population,
    Nightlight,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Unweighted => "unweighted",
            WeightKind::Population => "population",
            WeightKind::Nightlight => "nightlight",
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(WeightKind::Unweighted),
            "population" => Ok(WeightKind::Population),
            "nightlight" | "nightlights" => Ok(WeightKind::Nightlight),
            other => Err(Error::Validation(format!("unknown weighting `{other}`"))),
        }
    }
}

/// Non-negative per-cell weights with the base year they were measured in.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    spec: GridSpec,
    values: Vec<f64>,
    kind: WeightKind,
    base_year: Option<i32>,
}

impl WeightGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>, kind: WeightKind, base_year: Option<i32>) -> Result<Self> {
        if values.len() != spec.n_cells() {
            return Err(Error::Shape(format!("expected {} weights, got {}", spec.n_cells(), values.len())));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!("weight {} at cell {i} is not finite and non-negative", values[i])));
        }
        match (kind, base_year) {
            (WeightKind::Unweighted, Some(y)) => {
                return Err(Error::Validation(format!("unweighted grid cannot carry base year {y}")))
            }
            (WeightKind::Population | WeightKind::Nightlight, None) => {
                return Err(Error::Validation(format!("{kind} weights need a base year")))
            }
            _ => {}
        }
        Ok(Self { spec, values, kind, base_year })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.spec.index(row, col)]
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn base_year(&self) -> Option<i32> {
        self.base_year
    }

    /// Serializes as a single-frame Grid Archive with `kind=` and `base_year=` keys.
    pub fn write_archive<W: Write>(&self, out: W, encoding: Encoding) -> Result<()> {
        let ts = Timestamp::year(self.base_year.unwrap_or(0));
        let frame = Raster::new(self.spec, self.values.clone(), Variable::Weight, ts)?;
        let series = RasterSeries::new(self.spec, Variable::Weight, Frequency::Annual, vec![frame])?;
        let opts = ArchiveOptions {
            encoding,
            sentinel: None,
            extras: vec![
                ("kind".into(), self.kind.to_string()),
                (
                    "base_year".into(),
                    self.base_year.map_or_else(|| "none".to_string(), |y| y.to_string()),
                ),
            ],
        };
        write_archive(out, &series, &opts)
    }

    pub fn read_archive<R: Read>(input: R) -> Result<Self> {
        let (header, series) = read_archive(input)?;
        if header.variable != Variable::Weight {
            return Err(Error::Validation(format!("expected variable=weight, found {}", header.variable)));
        }
        let kind: WeightKind = header
            .extra("kind")
            .ok_or_else(|| Error::parse("header", "weight archive lacks `kind=`"))?
            .parse()?;
        let base_year = match header.extra("base_year") {
            None | Some("none") => None,
            Some(y) => Some(y.parse().map_err(|_| Error::parse("header", format!("invalid base_year `{y}`")))?),
        };
        let frame = match series.frames() {
            [f] => f,
            other => return Err(Error::Shape(format!("weight archive must hold one frame, found {}", other.len()))),
        };
        let values = frame.values().iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
        Self::new(*series.spec(), values, kind, base_year)
    }
}

/// All-ones weights; the aggregation reduces to area-and-fraction weighting.
pub fn unweighted(spec: &GridSpec) -> WeightGrid {
    WeightGrid {
        spec: *spec,
        values: vec![1.0; spec.n_cells()],
        kind: WeightKind::Unweighted,
        base_year: None,
    }
}

/// Population head counts: density (persons/km²) times spherical cell area.
/// Masked density cells get weight 0.
pub fn population_weight(density: &Raster, spec: &GridSpec, base_year: i32) -> Result<WeightGrid> {
    if density.spec() != spec {
        return Err(Error::Shape("density raster is not on the target grid".into()));
    }
    let areas = spec.row_areas();
    let mut values = Vec::with_capacity(spec.n_cells());
    for row in 0..spec.n_rows() {
        for col in 0..spec.n_cols() {
            let w = match density.get(row, col) {
                None => 0.0,
                Some(d) if d.is_finite() && d >= 0.0 => d * areas[row],
                Some(d) => {
                    return Err(Error::Validation(format!("density {d} at ({row}, {col}) is negative or infinite")))
                }
            };
            values.push(w);
        }
    }
    WeightGrid::new(*spec, values, WeightKind::Population, Some(base_year))
}

/// Night-light radiance used directly as a weight; masked cells get 0.
pub fn nightlight_weight(radiance: &Raster, base_year: i32) -> Result<WeightGrid> {
    let values = radiance
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            v if v.is_nan() => Ok(0.0),
            v if v.is_finite() && v >= 0.0 => Ok(v),
            v => Err(Error::Validation(format!("radiance {v} at cell {i} is negative or infinite"))),
        })
        .collect::<Result<Vec<_>>>()?;
    WeightGrid::new(*radiance.spec(), values, WeightKind::Nightlight, Some(base_year))
}

/// Arithmetic mean of each `factor × factor` block, starting from the
/// north-west cell. Masked fine cells are skipped; an all-masked block is masked.
pub fn downsample_block_mean(fine: &Raster, factor: usize) -> Result<Raster> {
    let spec = fine.spec();
    if factor == 0 {
        return Err(Error::Validation("factor must be positive".into()));
    }
    if spec.n_rows() % factor != 0 || spec.n_cols() % factor != 0 {
        return Err(Error::Shape(format!(
            "{}×{} grid is not divisible by factor {factor}",
            spec.n_rows(),
            spec.n_cols()
        )));
    }
    let coarse_size = spec.cell_size() * factor as f64;
    let (lon_west, lat_north) = match spec.registration() {
        Registration::Corner => (spec.lon_west(), spec.lat_north()),
        Registration::Center => (spec.outer_west() + coarse_size / 2.0, spec.outer_north() - coarse_size / 2.0),
    };
    let out_spec = GridSpec::new(
        spec.n_rows() / factor,
        spec.n_cols() / factor,
        lon_west,
        lat_north,
        coarse_size,
        spec.registration(),
    )?;

    let mut values = Vec::with_capacity(out_spec.n_cells());
    for r in 0..out_spec.n_rows() {
        for c in 0..out_spec.n_cols() {
            let mut acc = NeumaierSum::new();
            let mut n = 0usize;
            for fr in r * factor..(r + 1) * factor {
                for fc in c * factor..(c + 1) * factor {
                    if let Some(v) = fine.get(fr, fc) {
                        acc.add(v);
                        n += 1;
                    }
                }
            }
            values.push(if n == 0 { f64::NAN } else { acc.value() / n as f64 });
        }
    }
    Raster::new(out_spec, values, fine.variable(), fine.timestamp())
}

/// Zeroes cells whose center lies strictly poleward of `±lat_cut` and whose
/// value is 0 in all three reference rasters. Masked reference cells never
/// count as zero; masked target cells are left alone.
pub fn aurora_correct(target: &Raster, refs: &[Raster], lat_cut: f64) -> Result<Raster> {
    if refs.len() != 3 {
        return Err(Error::Validation(format!("aurora correction needs 3 reference rasters, got {}", refs.len())));
    }
    let spec = target.spec();
    if let Some(i) = refs.iter().position(|r| r.spec() != spec) {
        return Err(Error::Shape(format!("reference raster {i} is not on the target grid")));
    }
    let mut values = target.values().to_vec();
    for row in 0..spec.n_rows() {
        if spec.row_center_lat(row).abs() <= lat_cut {
            continue;
        }
        for col in 0..spec.n_cols() {
            let i = spec.index(row, col);
            if target.mask()[i] {
                continue;
            }
            if refs.iter().all(|r| r.get(row, col) == Some(0.0)) {
                values[i] = 0.0;
            }
        }
    }
    Raster::with_mask(*spec, values, target.mask().to_vec(), target.variable(), target.timestamp())
}

/// Moves corner-registered weights onto a center-registered grid whose cell
/// centers sit on the source corners (one extra row, same columns).
///
/// Each target cell takes the plain mean of the source cells its footprint
/// intersects: four in the interior, two on the pole rows. Global sources
/// wrap in longitude so the seam column also averages four.
pub fn resample_half_offset(weights: &WeightGrid, target: &GridSpec) -> Result<WeightGrid> {
    let src = weights.spec();
    let cs = src.cell_size();
    let tol = cs * 1e-9;
    if src.registration() != Registration::Corner || target.registration() != Registration::Center {
        return Err(Error::Alignment("source must be corner-registered and target center-registered".into()));
    }
    if (target.cell_size() - cs).abs() > tol {
        return Err(Error::Alignment(format!(
            "cell sizes differ: source {cs}, target {}",
            target.cell_size()
        )));
    }
    if (target.outer_west() - (src.outer_west() - cs / 2.0)).abs() > tol
        || (target.outer_north() - (src.outer_north() + cs / 2.0)).abs() > tol
    {
        return Err(Error::Alignment("target extent is not offset by exactly half a cell".into()));
    }
    if target.n_rows() != src.n_rows() + 1 || target.n_cols() != src.n_cols() {
        return Err(Error::Alignment(format!(
            "expected a {}×{} target, got {}×{}",
            src.n_rows() + 1,
            src.n_cols(),
            target.n_rows(),
            target.n_cols()
        )));
    }
    let periodic = (src.n_cols() as f64 * cs - 360.0).abs() <= tol * src.n_cols() as f64;
    let (n, m) = (src.n_rows(), src.n_cols());

    let mut values = Vec::with_capacity(target.n_cells());
    for r in 0..=n {
        let rows: &[usize] = &match r {
            0 => vec![0],
            r if r == n => vec![n - 1],
            r => vec![r - 1, r],
        };
        for c in 0..m {
            let cols: Vec<usize> = match c {
                0 if periodic => vec![m - 1, 0],
                0 => vec![0],
                c => vec![c - 1, c],
            };
            let mut acc = NeumaierSum::new();
            for &sr in rows {
                for &sc in &cols {
                    acc.add(weights.get(sr, sc));
                }
            }
            values.push(acc.value() / (rows.len() * cols.len()) as f64);
        }
    }
    WeightGrid::new(*target, values, weights.kind(), weights.base_year())
}
