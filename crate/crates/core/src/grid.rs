//! Regular lon/lat grids, raster planes and the Grid Archive format.
//!
//! Cells are indexed row-major from the north-west corner. A grid is either
//! *corner* registered, where `(lon_west, lat_north)` is the outer corner of
//! cell `(0, 0)`, or *center* registered, where it is that cell's center.
//! Center-registered global grids (721 rows at 0.25°) overhang the poles by
//! half a cell; their edges are clamped to ±90° so the pole rows become
//! half-height cells.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Registration {
    Corner,
    Center,
}

impl Registration {
    pub fn as_str(self) -> &'static str {
        match self {
            Registration::Corner => "corner",
            Registration::Center => "center",
        }
    }
}

impl FromStr for Registration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner" => Ok(Registration::Corner),
            "center" => Ok(Registration::Center),
            other => Err(Error::Validation(format!("unknown registration `{other}`"))),
        }
    }
}

/// Cell edges in degrees, latitudes clamped to the poles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBounds {
    pub lon_w: f64,
    pub lon_e: f64,
    pub lat_s: f64,
    pub lat_n: f64,
}

impl CellBounds {
    pub fn width(&self) -> f64 {
        self.lon_e - self.lon_w
    }

    pub fn height(&self) -> f64 {
        self.lat_n - self.lat_s
    }

    /// Area in degrees².
    pub fn planar_area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Geometry of a regular lon/lat grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    n_rows: usize,
    n_cols: usize,
    lon_west: f64,
    lat_north: f64,
    cell_size: f64,
    registration: Registration,
}

impl GridSpec {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        lon_west: f64,
        lat_north: f64,
        cell_size: f64,
        registration: Registration,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Validation("grid must have at least one row and one column".into()));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Validation(format!("cell_size must be positive, got {cell_size}")));
        }
        if !(lon_west.is_finite() && (-180.0..180.0).contains(&lon_west)) {
            return Err(Error::Validation(format!("lon_west {lon_west} outside [-180, 180)")));
        }
        if !(lat_north.is_finite() && (-90.0..=90.0).contains(&lat_north)) {
            return Err(Error::Validation(format!("lat_north {lat_north} outside [-90, 90]")));
        }
        if n_rows as f64 * cell_size > 180.0 + cell_size + GEOM_EPS {
            return Err(Error::Validation(format!(
                "{n_rows} rows of {cell_size}° exceed the latitude range"
            )));
        }
        if n_cols as f64 * cell_size > 360.0 + GEOM_EPS {
            return Err(Error::Validation(format!(
                "{n_cols} columns of {cell_size}° exceed the longitude range"
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            lon_west,
            lat_north,
            cell_size,
            registration,
        })
    }

    /// Global corner-registered grid, e.g. 360×720 at 0.5°.
    pub fn global_corner(cell_size: f64) -> Result<Self> {
        let n_rows = (180.0 / cell_size).round() as usize;
        let n_cols = (360.0 / cell_size).round() as usize;
        Self::new(n_rows, n_cols, -180.0, 90.0, cell_size, Registration::Corner)
    }

    /// Global center-registered grid with centers spanning [-90, 90], e.g. 721×1440 at 0.25°.
    pub fn global_center(cell_size: f64) -> Result<Self> {
        let n_rows = (180.0 / cell_size).round() as usize + 1;
        let n_cols = (360.0 / cell_size).round() as usize;
        Self::new(n_rows, n_cols, -180.0, 90.0, cell_size, Registration::Center)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn lon_west(&self) -> f64 {
        self.lon_west
    }

    pub fn lat_north(&self) -> f64 {
        self.lat_north
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn registration(&self) -> Registration {
        self.registration
    }

    fn registration_offset(&self) -> f64 {
        match self.registration {
            Registration::Corner => 0.0,
            Registration::Center => self.cell_size / 2.0,
        }
    }

    /// Western edge of column 0 (may lie west of -180 for center registration).
    pub fn outer_west(&self) -> f64 {
        self.lon_west - self.registration_offset()
    }

    /// Unclamped northern edge of row 0.
    pub fn outer_north(&self) -> f64 {
        self.lat_north + self.registration_offset()
    }

    pub fn outer_east(&self) -> f64 {
        self.lon_edge(self.n_cols)
    }

    /// Longitude of the `k`-th column edge, `k` in `0..=n_cols`.
    ///
    /// Every edge is derived from the same expression so adjacent cells share
    /// bit-identical boundaries.
    #[inline]
    pub fn lon_edge(&self, k: usize) -> f64 {
        self.outer_west() + k as f64 * self.cell_size
    }

    /// Clamped latitude of the `k`-th row edge, `k` in `0..=n_rows`.
    #[inline]
    pub fn lat_edge(&self, k: usize) -> f64 {
        (self.outer_north() - k as f64 * self.cell_size).clamp(-90.0, 90.0)
    }

    /// Nominal (unclamped) latitude of a row's center.
    pub fn row_center_lat(&self, row: usize) -> f64 {
        self.outer_north() - (row as f64 + 0.5) * self.cell_size
    }

    pub fn col_center_lon(&self, col: usize) -> f64 {
        self.outer_west() + (col as f64 + 0.5) * self.cell_size
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row >= self.n_rows {
            return Err(Error::Index(format!("row {row} not in 0..{}", self.n_rows)));
        }
        Ok(())
    }

    fn check_col(&self, col: usize) -> Result<()> {
        if col >= self.n_cols {
            return Err(Error::Index(format!("col {col} not in 0..{}", self.n_cols)));
        }
        Ok(())
    }

    pub fn cell_bounds(&self, row: usize, col: usize) -> Result<CellBounds> {
        self.check_row(row)?;
        self.check_col(col)?;
        Ok(self.bounds_unchecked(row, col))
    }

    #[inline]
    pub(crate) fn bounds_unchecked(&self, row: usize, col: usize) -> CellBounds {
        CellBounds {
            lon_w: self.lon_edge(col),
            lon_e: self.lon_edge(col + 1),
            lat_s: self.lat_edge(row + 1),
            lat_n: self.lat_edge(row),
        }
    }

    /// Spherical area of any cell in `row`, km².
    pub fn cell_area(&self, row: usize) -> Result<f64> {
        self.check_row(row)?;
        Ok(self.row_area_unchecked(row))
    }

    pub(crate) fn row_area_unchecked(&self, row: usize) -> f64 {
        let south = self.lat_edge(row + 1).to_radians();
        let north = self.lat_edge(row).to_radians();
        EARTH_RADIUS_KM * EARTH_RADIUS_KM * self.cell_size.to_radians() * (north.sin() - south.sin())
    }

    /// Per-row cell areas, km².
    pub fn row_areas(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row_area_unchecked(r)).collect()
    }

    /// Planar area of any cell in `row`, degrees².
    pub fn planar_cell_area(&self, row: usize) -> Result<f64> {
        self.check_row(row)?;
        Ok(self.bounds_unchecked(row, 0).planar_area())
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    /// Longitude shifts (multiples of 360°) under which geometry in [-180, 180]
    /// can overlap this grid's extent.
    pub(crate) fn wrap_shifts(&self) -> Vec<f64> {
        let mut shifts = vec![0.0];
        if self.outer_west() < -180.0 {
            shifts.push(-360.0);
        }
        if self.outer_east() > 180.0 {
            shifts.push(360.0);
        }
        shifts
    }

    fn header_lines(&self) -> [(&'static str, String); 6] {
        [
            ("rows", self.n_rows.to_string()),
            ("cols", self.n_cols.to_string()),
            ("lon_west", self.lon_west.to_string()),
            ("lat_north", self.lat_north.to_string()),
            ("cell_size", self.cell_size.to_string()),
            ("registration", self.registration.as_str().to_string()),
        ]
    }

    /// Serializes as comma-separated `key=value` pairs, the inverse of [`FromStr`].
    pub fn to_inline(&self) -> String {
        self.header_lines()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `rows=..,cols=..,lon_west=..,lat_north=..,cell_size=..,registration=..`
    /// separated by commas, whitespace or newlines. Unknown keys are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let mut fields = SpecFields::default();
        for (i, tok) in s.split(|c: char| c == ',' || c.is_whitespace()).enumerate() {
            if tok.is_empty() {
                continue;
            }
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("token {i}"), format!("expected key=value, got `{tok}`")))?;
            fields.set(k, v, &format!("token {i}"))?;
        }
        fields.build("grid spec")
    }
}

#[derive(Default)]
struct SpecFields {
    rows: Option<usize>,
    cols: Option<usize>,
    lon_west: Option<f64>,
    lat_north: Option<f64>,
    cell_size: Option<f64>,
    registration: Option<Registration>,
}

impl SpecFields {
    /// Returns false when the key is not a spec field.
    fn set(&mut self, key: &str, value: &str, loc: &str) -> Result<bool> {
        fn num<T: FromStr>(v: &str, key: &str, loc: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::parse(loc, format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "rows" => self.rows = Some(num(value, key, loc)?),
            "cols" => self.cols = Some(num(value, key, loc)?),
            "lon_west" => self.lon_west = Some(num(value, key, loc)?),
            "lat_north" => self.lat_north = Some(num(value, key, loc)?),
            "cell_size" => self.cell_size = Some(num(value, key, loc)?),
            "registration" => {
                self.registration = Some(value.trim().parse().map_err(|e: Error| Error::parse(loc, e.to_string()))?)
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn build(self, loc: &str) -> Result<GridSpec> {
        let missing = |k: &str| Error::parse(loc, format!("missing `{k}`"));
        GridSpec::new(
            self.rows.ok_or_else(|| missing("rows"))?,
            self.cols.ok_or_else(|| missing("cols"))?,
            self.lon_west.ok_or_else(|| missing("lon_west"))?,
            self.lat_north.ok_or_else(|| missing("lat_north"))?,
            self.cell_size.ok_or_else(|| missing("cell_size"))?,
            self.registration.ok_or_else(|| missing("registration"))?,
        )
    }
}

/// Physical quantity carried by a raster; fixes its units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Temperature,
    Precipitation,
    Spei,
    PopulationDensity,
    Nightlight,
    Weight,
    Generic,
}

impl Variable {
    pub fn as_str(self) -> &'static str {
        match self {
            Variable::Temperature => "temperature",
            Variable::Precipitation => "precipitation",
            Variable::Spei => "spei",
            Variable::PopulationDensity => "population_density",
            Variable::Nightlight => "nightlight",
            Variable::Weight => "weight",
            Variable::Generic => "generic",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Variable::Temperature => "°C",
            Variable::Precipitation => "mm",
            Variable::Spei => "1",
            Variable::PopulationDensity => "persons/km²",
            Variable::Nightlight => "radiance",
            Variable::Weight | Variable::Generic => "",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "temperature" => Variable::Temperature,
            "precipitation" => Variable::Precipitation,
            "spei" => Variable::Spei,
            "population_density" => Variable::PopulationDensity,
            "nightlight" => Variable::Nightlight,
            "weight" => Variable::Weight,
            "generic" => Variable::Generic,
            other => return Err(Error::Validation(format!("unknown variable `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Daily,
    Monthly,
    Annual,
}

impl Frequency {
    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Daily => "daily",
            Frequency::Monthly => "monthly",
            Frequency::Annual => "annual",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daily" => Ok(Frequency::Daily),
            "monthly" => Ok(Frequency::Monthly),
            "annual" => Ok(Frequency::Annual),
            other => Err(Error::Validation(format!("unknown frequency `{other}`"))),
        }
    }
}

/// A calendar year, month or day; formatted `YYYY`, `YYYY-MM` or `YYYY-MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Timestamp {
    year: i32,
    month: Option<u32>,
    day: Option<u32>,
}

impl Timestamp {
    pub fn year(year: i32) -> Self {
        Self { year, month: None, day: None }
    }

    pub fn month(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Validation(format!("month {month} out of range")));
        }
        Ok(Self { year, month: Some(month), day: None })
    }

    pub fn day(year: i32, month: u32, day: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| Error::Validation(format!("invalid date {year:04}-{month:02}-{day:02}")))?;
        Ok(Self { year, month: Some(month), day: Some(day) })
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: Some(date.month()),
            day: Some(date.day()),
        }
    }

    pub fn year_value(&self) -> i32 {
        self.year
    }

    pub fn month_value(&self) -> Option<u32> {
        self.month
    }

    pub fn day_value(&self) -> Option<u32> {
        self.day
    }

    pub fn frequency(&self) -> Frequency {
        match (self.month, self.day) {
            (_, Some(_)) => Frequency::Daily,
            (Some(_), None) => Frequency::Monthly,
            _ => Frequency::Annual,
        }
    }

    pub fn to_date(&self) -> Option<NaiveDate> {
        NaiveDate::from_ymd_opt(self.year, self.month?, self.day?)
    }

    /// Truncates to a coarser frequency; `None` if `target` is finer than `self`.
    pub fn truncate(&self, target: Frequency) -> Option<Self> {
        if target < self.frequency() {
            return None;
        }
        Some(match target {
            Frequency::Daily => *self,
            Frequency::Monthly => Self { year: self.year, month: self.month, day: None },
            Frequency::Annual => Self::year(self.year),
        })
    }

    /// Number of sub-periods of frequency `finer` contained in this timestamp.
    pub fn members(&self, finer: Frequency) -> Option<usize> {
        match (self.frequency(), finer) {
            (a, b) if a == b => Some(1),
            (Frequency::Annual, Frequency::Monthly) => Some(12),
            (Frequency::Annual, Frequency::Daily) => {
                let leap = NaiveDate::from_ymd_opt(self.year, 2, 29).is_some();
                Some(if leap { 366 } else { 365 })
            }
            (Frequency::Monthly, Frequency::Daily) => {
                let month = self.month?;
                let first = NaiveDate::from_ymd_opt(self.year, month, 1)?;
                let next = if month == 12 {
                    NaiveDate::from_ymd_opt(self.year + 1, 1, 1)?
                } else {
                    NaiveDate::from_ymd_opt(self.year, month + 1, 1)?
                };
                Some((next - first).num_days() as usize)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}", self.year)?;
        if let Some(m) = self.month {
            write!(f, "-{m:02}")?;
        }
        if let Some(d) = self.day {
            write!(f, "-{d:02}")?;
        }
        Ok(())
    }
}

impl FromStr for Timestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("invalid timestamp `{s}`"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        let num = |p: &str, width: usize| -> Result<u32> {
            if p.len() != width || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            p.parse().map_err(|_| bad())
        };
        let year = num(parts[0], 4)? as i32;
        match parts.len() {
            1 => Ok(Self::year(year)),
            2 => Self::month(year, num(parts[1], 2)?),
            3 => Self::day(year, num(parts[1], 2)?, num(parts[2], 2)?),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One time-stamped value plane with a missing-data mask.
///
/// Masked cells always hold NaN so that equality and serialization never
/// depend on whatever value the source carried there.
#[derive(Debug, Clone)]
pub struct Raster {
    spec: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
    variable: Variable,
    timestamp: Timestamp,
}

impl Raster {
    /// Builds a raster from row-major values; NaN marks a missing cell.
    pub fn new(spec: GridSpec, values: Vec<f64>, variable: Variable, timestamp: Timestamp) -> Result<Self> {
        let mask = values.iter().map(|v| v.is_nan()).collect();
        Self::with_mask(spec, values, mask, variable, timestamp)
    }

    pub fn with_mask(
        spec: GridSpec,
        mut values: Vec<f64>,
        mask: Vec<bool>,
        variable: Variable,
        timestamp: Timestamp,
    ) -> Result<Self> {
        if values.len() != spec.n_cells() || mask.len() != spec.n_cells() {
            return Err(Error::Shape(format!(
                "expected {} cells, got {} values and {} mask entries",
                spec.n_cells(),
                values.len(),
                mask.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m || v.is_nan() {
                *v = f64::NAN;
            }
        }
        let mask = values.iter().map(|v| v.is_nan()).collect();
        Ok(Self { spec, values, mask, variable, timestamp })
    }

    pub fn filled(spec: GridSpec, value: f64, variable: Variable, timestamp: Timestamp) -> Self {
        Self::new(spec, vec![value; spec.n_cells()], variable, timestamp).expect("sized to spec")
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn variable(&self) -> Variable {
        self.variable
    }

    pub fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    /// Row-major values; masked cells are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[self.spec.index(row, col)]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.spec.index(row, col);
        (!self.mask[i]).then(|| self.values[i])
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same plane with a different timestamp.
    pub fn with_timestamp(mut self, timestamp: Timestamp) -> Self {
        self.timestamp = timestamp;
        self
    }
}

impl PartialEq for Raster {
    /// Bitwise equality on unmasked values.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.variable == other.variable
            && self.timestamp == other.timestamp
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &m)| m || a.to_bits() == b.to_bits())
    }
}

/// Time-ordered rasters sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSeries {
    spec: GridSpec,
    variable: Variable,
    frequency: Frequency,
    frames: Vec<Raster>,
}

impl RasterSeries {
    pub fn new(spec: GridSpec, variable: Variable, frequency: Frequency, frames: Vec<Raster>) -> Result<Self> {
        for (i, frame) in frames.iter().enumerate() {
            if frame.spec != spec {
                return Err(Error::Shape(format!("frame {i} has a different grid spec")));
            }
            if frame.variable != variable {
                return Err(Error::Validation(format!(
                    "frame {i} carries {} but the series is {variable}",
                    frame.variable
                )));
            }
            if frame.timestamp.frequency() != frequency {
                return Err(Error::Frequency(format!(
                    "frame {i} timestamp {} is not {frequency}",
                    frame.timestamp
                )));
            }
            if i > 0 && frames[i - 1].timestamp >= frame.timestamp {
                return Err(Error::Validation(format!(
                    "timestamps not strictly increasing at frame {i} ({} after {})",
                    frame.timestamp,
                    frames[i - 1].timestamp
                )));
            }
        }
        Ok(Self { spec, variable, frequency, frames })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn variable(&self) -> Variable {
        self.variable
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn frames(&self) -> &[Raster] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<Raster> {
        self.frames
    }
}

// ---------------------------------------------------------------------------
// Grid Archive
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    LeFloat64,
}

impl Encoding {
    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::Text => "text",
            Encoding::LeFloat64 => "le_float64",
        }
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Encoding::Text),
            "le_float64" => Ok(Encoding::LeFloat64),
            other => Err(Error::Validation(format!("unknown encoding `{other}`"))),
        }
    }
}

/// Everything in an archive header besides the grid spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub spec: GridSpec,
    pub variable: Variable,
    pub frequency: Frequency,
    pub sentinel: Option<f64>,
    pub frames: usize,
    pub encoding: Encoding,
    /// Keys outside the core set (e.g. `kind`, `base_year` on weight grids), in file order.
    pub extras: Vec<(String, String)>,
}

impl ArchiveHeader {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Options for [`write_archive`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveOptions {
    pub encoding: Encoding,
    pub sentinel: Option<f64>,
    pub extras: Vec<(String, String)>,
}

impl ArchiveOptions {
    pub fn text() -> Self {
        Self { encoding: Encoding::Text, sentinel: None, extras: Vec::new() }
    }

    pub fn binary() -> Self {
        Self { encoding: Encoding::LeFloat64, sentinel: None, extras: Vec::new() }
    }

    pub fn with_sentinel(mut self, sentinel: f64) -> Self {
        self.sentinel = Some(sentinel);
        self
    }
}

const CORE_KEYS: [&str; 11] = [
    "rows",
    "cols",
    "lon_west",
    "lat_north",
    "cell_size",
    "registration",
    "variable",
    "frequency",
    "sentinel",
    "frames",
    "encoding",
];

/// Serializes a series in the Grid Archive format.
pub fn write_archive<W: Write>(mut out: W, series: &RasterSeries, opts: &ArchiveOptions) -> Result<()> {
    if let Some(s) = opts.sentinel {
        if !s.is_finite() {
            return Err(Error::Validation("sentinel must be finite".into()));
        }
    }
    for (k, v) in &opts.extras {
        if CORE_KEYS.contains(&k.as_str()) || k == "timestamp" || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Validation(format!("invalid extra header key `{k}`")));
        }
    }
    let mut header = String::new();
    for (k, v) in series.spec.header_lines() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("variable={}\n", series.variable));
    header.push_str(&format!("frequency={}\n", series.frequency));
    match opts.sentinel {
        Some(s) => header.push_str(&format!("sentinel={s}\n")),
        None => header.push_str("sentinel=none\n"),
    }
    header.push_str(&format!("frames={}\n", series.frames.len()));
    header.push_str(&format!("encoding={}\n", opts.encoding.as_str()));
    for (k, v) in &opts.extras {
        header.push_str(&format!("{k}={v}\n"));
    }
    out.write_all(header.as_bytes())?;

    let n_cols = series.spec.n_cols;
    for frame in &series.frames {
        writeln!(out, "timestamp={}", frame.timestamp)?;
        let cell = |i: usize| -> Result<f64> {
            if frame.mask[i] {
                return Ok(opts.sentinel.unwrap_or(f64::NAN));
            }
            let v = frame.values[i];
            if Some(v) == opts.sentinel {
                return Err(Error::Validation(format!(
                    "frame {}: unmasked value equals the sentinel {v}",
                    frame.timestamp
                )));
            }
            Ok(v)
        };
        match opts.encoding {
            Encoding::Text => {
                let mut line = String::new();
                for row in 0..series.spec.n_rows {
                    line.clear();
                    for col in 0..n_cols {
                        if col > 0 {
                            line.push(' ');
                        }
                        line.push_str(&cell(row * n_cols + col)?.to_string());
                    }
                    line.push('\n');
                    out.write_all(line.as_bytes())?;
                }
            }
            Encoding::LeFloat64 => {
                let mut buf = Vec::with_capacity(frame.values.len() * 8);
                for i in 0..frame.values.len() {
                    buf.extend_from_slice(&cell(i)?.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn archive_to_bytes(series: &RasterSeries, opts: &ArchiveOptions) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_archive(&mut buf, series, opts)?;
    Ok(buf)
}

/// Reads a Grid Archive; text and binary payloads are detected from the header.
pub fn parse_grid_archive<R: Read>(input: R) -> Result<RasterSeries> {
    read_archive(input).map(|(_, series)| series)
}

struct LineReader<R> {
    inner: R,
    line_no: usize,
    offset: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> LineReader<R> {
    /// Next line without its terminator, or `None` at EOF.
    fn next_line(&mut self) -> Result<Option<String>> {
        self.buf.clear();
        let n = self.inner.read_until(b'\n', &mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        self.offset += n;
        if self.buf.last() == Some(&b'\n') {
            self.buf.pop();
            if self.buf.last() == Some(&b'\r') {
                self.buf.pop();
            }
        }
        String::from_utf8(self.buf.clone())
            .map(Some)
            .map_err(|_| Error::parse(self.loc(), "header line is not UTF-8"))
    }

    fn loc(&self) -> String {
        format!("line {} (byte offset {})", self.line_no, self.offset)
    }

    fn read_exact_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut data = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            let k = self.inner.read(&mut data[filled..])?;
            if k == 0 {
                return Err(Error::parse(
                    format!("byte offset {}", self.offset + filled),
                    format!("shape mismatch: payload truncated, expected {n} bytes, found {filled}"),
                ));
            }
            filled += k;
        }
        self.offset += n;
        Ok(data)
    }
}

/// Reads a Grid Archive and returns its header alongside the series.
pub fn read_archive<R: Read>(input: R) -> Result<(ArchiveHeader, RasterSeries)> {
    let mut reader = LineReader {
        inner: BufReader::new(input),
        line_no: 0,
        offset: 0,
        buf: Vec::new(),
    };

    let mut spec_fields = SpecFields::default();
    let mut variable = None;
    let mut frequency = None;
    let mut sentinel: Option<Option<f64>> = None;
    let mut frame_count: Option<usize> = None;
    let mut encoding = None;
    let mut extras = Vec::new();
    let mut pending_timestamp = None;

    while let Some(line) = reader.next_line()? {
        let loc = reader.loc();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::parse(&loc, format!("malformed header line `{trimmed}`")))?;
        let value = value.trim();
        if key == "timestamp" {
            pending_timestamp = Some((value.to_string(), loc));
            break;
        }
        if spec_fields.set(key, value, &loc)? {
            continue;
        }
        match key {
            "variable" => variable = Some(value.parse::<Variable>().map_err(|e| Error::parse(&loc, e.to_string()))?),
            "frequency" => {
                frequency = Some(value.parse::<Frequency>().map_err(|e| Error::parse(&loc, e.to_string()))?)
            }
            "sentinel" => {
                sentinel = Some(if value == "none" {
                    None
                } else {
                    let s: f64 = value
                        .parse()
                        .map_err(|_| Error::parse(&loc, format!("invalid sentinel `{value}`")))?;
                    if !s.is_finite() {
                        return Err(Error::parse(&loc, "sentinel must be finite"));
                    }
                    Some(s)
                })
            }
            "frames" => {
                frame_count = Some(
                    value
                        .parse()
                        .map_err(|_| Error::parse(&loc, format!("invalid frame count `{value}`")))?,
                )
            }
            "encoding" => encoding = Some(value.parse::<Encoding>().map_err(|e| Error::parse(&loc, e.to_string()))?),
            _ => extras.push((key.to_string(), value.to_string())),
        }
    }

    let header_loc = reader.loc();
    let missing = |k: &str| Error::parse(&header_loc, format!("malformed header: missing `{k}`"));
    let spec = spec_fields
        .build(&header_loc)
        .map_err(|e| Error::parse(&header_loc, format!("malformed header: {e}")))?;
    let header = ArchiveHeader {
        spec,
        variable: variable.ok_or_else(|| missing("variable"))?,
        frequency: frequency.ok_or_else(|| missing("frequency"))?,
        sentinel: sentinel.ok_or_else(|| missing("sentinel"))?,
        frames: frame_count.ok_or_else(|| missing("frames"))?,
        encoding: encoding.ok_or_else(|| missing("encoding"))?,
        extras,
    };

    let n_cells = spec.n_cells();
    let mut frames = Vec::with_capacity(header.frames);
    // Text payloads may wrap rows across lines, so tokens are carried over.
    let mut carry: Option<(String, String)> = pending_timestamp;

    for frame_idx in 0..header.frames {
        let (ts_text, ts_loc) = match carry.take() {
            Some(t) => t,
            None => loop {
                match reader.next_line()? {
                    None => {
                        return Err(Error::parse(
                            reader.loc(),
                            format!("shape mismatch: expected {} frames, found {frame_idx}", header.frames),
                        ))
                    }
                    Some(l) if l.trim().is_empty() => continue,
                    Some(l) => {
                        let loc = reader.loc();
                        let ts = l.trim().strip_prefix("timestamp=").ok_or_else(|| {
                            Error::parse(&loc, format!("expected `timestamp=` line, got `{}`", l.trim()))
                        })?;
                        break (ts.to_string(), loc);
                    }
                }
            },
        };
        let timestamp: Timestamp = ts_text.parse().map_err(|e: Error| Error::parse(&ts_loc, e.to_string()))?;

        let mut values = Vec::with_capacity(n_cells);
        match header.encoding {
            Encoding::LeFloat64 => {
                let bytes = reader.read_exact_bytes(n_cells * 8)?;
                values.extend(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))),
                );
            }
            Encoding::Text => {
                while values.len() < n_cells {
                    let line = reader.next_line()?.ok_or_else(|| {
                        Error::parse(
                            reader.loc(),
                            format!(
                                "shape mismatch: frame {timestamp} has {} of {n_cells} values",
                                values.len()
                            ),
                        )
                    })?;
                    let loc = reader.loc();
                    if line.trim_start().starts_with("timestamp=") {
                        return Err(Error::parse(
                            loc,
                            format!(
                                "shape mismatch: frame {timestamp} has {} of {n_cells} values",
                                values.len()
                            ),
                        ));
                    }
                    for tok in line.split_whitespace() {
                        if values.len() == n_cells {
                            return Err(Error::parse(
                                &loc,
                                format!("shape mismatch: frame {timestamp} has more than {n_cells} values"),
                            ));
                        }
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| Error::parse(&loc, format!("invalid number `{tok}`")))?;
                        values.push(v);
                    }
                }
            }
        }
        let mask: Vec<bool> = values
            .iter()
            .map(|&v| v.is_nan() || Some(v) == header.sentinel)
            .collect();
        let raster = Raster::with_mask(spec, values, mask, header.variable, timestamp)
            .map_err(|e| Error::parse(&ts_loc, e.to_string()))?;
        frames.push(raster);
    }

    // Anything after the declared frames is an error.
    if let Some((_, loc)) = carry {
        return Err(Error::parse(loc, "shape mismatch: frame present but header declares frames=0"));
    }
    match header.encoding {
        Encoding::Text => {
            while let Some(line) = reader.next_line()? {
                if !line.trim().is_empty() {
                    return Err(Error::parse(
                        reader.loc(),
                        format!("shape mismatch: trailing data after {} frames", header.frames),
                    ));
                }
            }
        }
        Encoding::LeFloat64 => {
            let mut rest = Vec::new();
            reader.inner.read_to_end(&mut rest)?;
            if !rest.is_empty() {
                return Err(Error::parse(
                    format!("byte offset {}", reader.offset),
                    format!("shape mismatch: {} trailing bytes after {} frames", rest.len(), header.frames),
                ));
            }
        }
    }

    let series = RasterSeries::new(spec, header.variable, header.frequency, frames)
        .map_err(|e| Error::parse("frames", e.to_string()))?;
    Ok((header, series))
}
