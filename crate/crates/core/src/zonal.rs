//! Weighted zonal aggregation of rasters over regions.
//!
//! For region `i` with covered cells `J_i`:
//!
//! ```text
//! y_i = Σ a_j·f_ij·w_j·x_j / Σ a_j·f_ij·w_j
//! ```
//!
//! Masked `x` cells drop out of both sums. A region whose remaining weight
//! mass is zero gets a missing value. Sums run in row-major cell order with
//! compensated accumulation, so results do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CoverageMatrix, Level};
use crate::grid::{Frequency, GridSpec, Raster, RasterSeries, Timestamp, Variable};
use crate::sum::NeumaierSum;
use crate::weights::{WeightGrid, WeightKind};

/// What the values of a table measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// The aggregated variable itself.
    Value,
    /// Number of days above a threshold.
    ExceedanceDays,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesHeader {
    pub level: Level,
    pub variable: Variable,
    pub units: String,
    pub measure: Measure,
    pub weighting: WeightKind,
    pub base_year: Option<i32>,
    pub frequency: Frequency,
}

impl SeriesHeader {
    pub fn new(level: Level, variable: Variable, weighting: WeightKind, base_year: Option<i32>, frequency: Frequency) -> Self {
        Self {
            level,
            variable,
            units: variable.units().to_string(),
            measure: Measure::Value,
            weighting,
            base_year,
            frequency,
        }
    }
}

/// Region × time table of aggregated values.
///
/// Regions are sorted by id, timestamps strictly increase, and `values[r][t]`
/// holds the value of region `r` at timestamp `t` or `None` when missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct SeriesTable {
    header: SeriesHeader,
    regions: Vec<String>,
    timestamps: Vec<Timestamp>,
    values: Vec<Vec<Option<f64>>>,
}

#[derive(Deserialize)]
struct RawTable {
    header: SeriesHeader,
    regions: Vec<String>,
    timestamps: Vec<Timestamp>,
    values: Vec<Vec<Option<f64>>>,
}

impl TryFrom<RawTable> for SeriesTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        SeriesTable::new(raw.header, raw.regions, raw.timestamps, raw.values)
    }
}

/// One `(region_id, timestamp, value)` row in canonical order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record<'a> {
    pub region_id: &'a str,
    pub timestamp: Timestamp,
    pub value: Option<f64>,
}

impl SeriesTable {
    pub fn new(
        header: SeriesHeader,
        regions: Vec<String>,
        timestamps: Vec<Timestamp>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if let Some(w) = regions.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "region ids must be unique and sorted: `{}` before `{}`",
                w[0], w[1]
            )));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("timestamps not strictly increasing at {} → {}", w[0], w[1])));
        }
        if let Some(t) = timestamps.iter().find(|t| t.frequency() != header.frequency) {
            return Err(Error::Frequency(format!("timestamp {t} in a {} table", header.frequency)));
        }
        if values.len() != regions.len() {
            return Err(Error::Shape(format!("{} value rows for {} regions", values.len(), regions.len())));
        }
        if let Some((i, row)) = values.iter().enumerate().find(|(_, r)| r.len() != timestamps.len()) {
            return Err(Error::Shape(format!(
                "region `{}` has {} values for {} timestamps",
                regions[i],
                row.len(),
                timestamps.len()
            )));
        }
        if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("table values must be finite".into()));
        }
        Ok(Self { header, regions, timestamps, values })
    }

    /// Builds a table from unordered records; absent pairs become missing.
    pub fn from_records<I>(header: SeriesHeader, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Timestamp, Option<f64>)>,
    {
        let mut cells: BTreeMap<String, BTreeMap<Timestamp, Option<f64>>> = BTreeMap::new();
        let mut times = std::collections::BTreeSet::new();
        for (region, ts, value) in records {
            times.insert(ts);
            if cells.entry(region.clone()).or_default().insert(ts, value).is_some() {
                return Err(Error::Validation(format!("duplicate record for ({region}, {ts})")));
            }
        }
        let timestamps: Vec<Timestamp> = times.into_iter().collect();
        let mut regions = Vec::with_capacity(cells.len());
        let mut values = Vec::with_capacity(cells.len());
        for (region, row) in cells {
            values.push(timestamps.iter().map(|t| row.get(t).copied().flatten()).collect());
            regions.push(region);
        }
        Self::new(header, regions, timestamps, values)
    }

    pub fn header(&self) -> &SeriesHeader {
        &self.header
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    /// Values of one region, aligned with [`timestamps`](Self::timestamps).
    pub fn row(&self, region: usize) -> &[Option<f64>] {
        &self.values[region]
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn region_index(&self, region_id: &str) -> Option<usize> {
        self.regions.binary_search_by(|r| r.as_str().cmp(region_id)).ok()
    }

    pub fn time_index(&self, ts: &Timestamp) -> Option<usize> {
        self.timestamps.binary_search(ts).ok()
    }

    /// `None` if the pair is absent, `Some(None)` if present but missing.
    pub fn get(&self, region_id: &str, ts: &Timestamp) -> Option<Option<f64>> {
        Some(self.values[self.region_index(region_id)?][self.time_index(ts)?])
    }

    pub fn n_records(&self) -> usize {
        self.regions.len() * self.timestamps.len()
    }

    /// Records ordered by region id, then timestamp.
    pub fn records(&self) -> impl Iterator<Item = Record<'_>> + '_ {
        self.regions.iter().zip(&self.values).flat_map(move |(region, row)| {
            self.timestamps.iter().zip(row).map(move |(ts, v)| Record {
                region_id: region,
                timestamp: *ts,
                value: *v,
            })
        })
    }

    /// First and last timestamps, if any.
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((*self.timestamps.first()?, *self.timestamps.last()?))
    }

    /// Keeps timestamps with year in `[year_start, year_end]` and, when given,
    /// only the listed regions (unknown ids are ignored).
    pub fn filter(&self, year_start: Option<i32>, year_end: Option<i32>, regions: Option<&[String]>) -> SeriesTable {
        let keep_t: Vec<usize> = (0..self.timestamps.len())
            .filter(|&t| {
                let y = self.timestamps[t].year_value();
                year_start.map_or(true, |s| y >= s) && year_end.map_or(true, |e| y <= e)
            })
            .collect();
        let keep_r: Vec<usize> = (0..self.regions.len())
            .filter(|&r| regions.map_or(true, |ids| ids.iter().any(|id| *id == self.regions[r])))
            .collect();
        SeriesTable {
            header: self.header.clone(),
            regions: keep_r.iter().map(|&r| self.regions[r].clone()).collect(),
            timestamps: keep_t.iter().map(|&t| self.timestamps[t]).collect(),
            values: keep_r
                .iter()
                .map(|&r| keep_t.iter().map(|&t| self.values[r][t]).collect())
                .collect(),
        }
    }
}

/// Per-region `(cell index, a·f·w)` terms with positive mass, row-major.
#[derive(Debug, Clone)]
pub struct ZonalKernel {
    spec: GridSpec,
    level: Level,
    weighting: WeightKind,
    base_year: Option<i32>,
    regions: Vec<String>,
    terms: Vec<Vec<(usize, f64)>>,
}

impl ZonalKernel {
    pub fn new(cov: &CoverageMatrix, w: &WeightGrid) -> Result<Self> {
        if cov.spec() != w.spec() {
            return Err(Error::Shape("coverage and weight grids differ".into()));
        }
        let spec = *cov.spec();
        let mut regions = Vec::with_capacity(cov.regions().len());
        let mut terms = Vec::with_capacity(cov.regions().len());
        for rc in cov.regions() {
            let t: Vec<(usize, f64)> = rc
                .entries
                .iter()
                .filter_map(|e| {
                    let idx = spec.index(e.row as usize, e.col as usize);
                    let m = e.area * e.fraction * w.values()[idx];
                    (m > 0.0).then_some((idx, m))
                })
                .collect();
            regions.push(rc.region_id.clone());
            terms.push(t);
        }
        Ok(Self {
            spec,
            level: cov.level(),
            weighting: w.kind(),
            base_year: w.base_year(),
            regions,
            terms,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    /// One value per region, in region-id order.
    pub fn apply(&self, x: &Raster) -> Result<Vec<Option<f64>>> {
        if x.spec() != &self.spec {
            return Err(Error::Shape("climate raster is not on the coverage grid".into()));
        }
        Ok(self.terms.iter().map(|t| reduce(t, x.values(), x.mask())).collect())
    }
}

fn reduce(terms: &[(usize, f64)], values: &[f64], mask: &[bool]) -> Option<f64> {
    let mut num = NeumaierSum::new();
    let mut den = NeumaierSum::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(j, m) in terms {
        if mask[j] {
            continue;
        }
        let x = values[j];
        num.add(m * x);
        den.add(m);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let d = den.value();
    // the ratio can land an ulp outside the data range
    (d > 0.0).then(|| (num.value() / d).clamp(lo, hi))
}

/// Aggregates one raster; returns `(region_id, value)` pairs sorted by id.
pub fn aggregate(x: &Raster, cov: &CoverageMatrix, w: &WeightGrid) -> Result<Vec<(String, Option<f64>)>> {
    if x.spec() != cov.spec() || x.spec() != w.spec() {
        return Err(Error::Shape("climate, coverage and weight grids must share one spec".into()));
    }
    let kernel = ZonalKernel::new(cov, w)?;
    let ys = kernel.apply(x)?;
    Ok(kernel.regions.iter().cloned().zip(ys).collect())
}

/// Aggregates every frame of a series into a table at the series frequency.
pub fn aggregate_series(xs: &RasterSeries, cov: &CoverageMatrix, w: &WeightGrid) -> Result<SeriesTable> {
    if xs.spec() != cov.spec() || xs.spec() != w.spec() {
        return Err(Error::Shape("climate, coverage and weight grids must share one spec".into()));
    }
    let kernel = ZonalKernel::new(cov, w)?;
    aggregate_with(&kernel, xs)
}

/// Like [`aggregate_series`] with a prebuilt kernel.
pub fn aggregate_with(kernel: &ZonalKernel, xs: &RasterSeries) -> Result<SeriesTable> {
    let per_frame: Vec<Vec<Option<f64>>> = xs
        .frames()
        .par_iter()
        .map(|frame| kernel.apply(frame))
        .collect::<Result<_>>()?;
    let values = (0..kernel.regions.len())
        .map(|r| per_frame.iter().map(|f| f[r]).collect())
        .collect();
    let header = SeriesHeader::new(kernel.level, xs.variable(), kernel.weighting, kernel.base_year, xs.frequency());
    SeriesTable::new(
        header,
        kernel.regions.clone(),
        xs.frames().iter().map(|f| f.timestamp()).collect(),
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CoverageEntry, RegionCoverage};
    use crate::grid::Registration;
    use crate::weights::unweighted;

    fn two_cells() -> (GridSpec, CoverageMatrix) {
        let spec = GridSpec::new(1, 2, 0.0, 0.5, 1.0, Registration::Corner).unwrap();
        let a = spec.cell_area(0).unwrap();
        let entries = (0..2)
            .map(|c| CoverageEntry { row: 0, col: c, fraction: 1.0, area: a })
            .collect();
        let cov = CoverageMatrix::new(
            spec,
            Level::L0,
            vec![RegionCoverage { region_id: "R".into(), entries }],
        )
        .unwrap();
        (spec, cov)
    }

    #[test]
    fn weighted_pair() {
        let (spec, cov) = two_cells();
        let w = WeightGrid::new(spec, vec![1.0, 3.0], WeightKind::Population, Some(2000)).unwrap();
        let x = Raster::new(spec, vec![10.0, 20.0], Variable::Temperature, Timestamp::year(2001)).unwrap();
        let y = aggregate(&x, &cov, &w).unwrap();
        assert_eq!(y, vec![("R".to_string(), Some(17.5))]);
    }

    #[test]
    fn masked_cells_leave_both_sums() {
        let (spec, cov) = two_cells();
        let w = WeightGrid::new(spec, vec![1.0, 3.0], WeightKind::Population, Some(2000)).unwrap();
        let x = Raster::new(spec, vec![10.0, f64::NAN], Variable::Temperature, Timestamp::year(2001)).unwrap();
        assert_eq!(aggregate(&x, &cov, &w).unwrap()[0].1, Some(10.0));
        let x = Raster::new(spec, vec![f64::NAN, f64::NAN], Variable::Temperature, Timestamp::year(2001)).unwrap();
        assert_eq!(aggregate(&x, &cov, &w).unwrap()[0].1, None);
    }

    #[test]
    fn zero_mass_is_missing() {
        let (spec, cov) = two_cells();
        let w = WeightGrid::new(spec, vec![0.0, 0.0], WeightKind::Nightlight, Some(2010)).unwrap();
        let x = Raster::filled(spec, 3.0, Variable::Temperature, Timestamp::year(2001));
        assert_eq!(aggregate(&x, &cov, &w).unwrap()[0].1, None);
    }

    #[test]
    fn spec_mismatch() {
        let (spec, cov) = two_cells();
        let other = GridSpec::new(1, 2, 0.0, 1.5, 1.0, Registration::Corner).unwrap();
        let x = Raster::filled(other, 3.0, Variable::Temperature, Timestamp::year(2001));
        assert!(matches!(aggregate(&x, &cov, &unweighted(&spec)), Err(Error::Shape(_))));
    }

    #[test]
    fn series_over_time() {
        let spec = GridSpec::new(1, 1, 0.0, 1.0, 1.0, Registration::Corner).unwrap();
        let cov = CoverageMatrix::new(
            spec,
            Level::L0,
            vec![RegionCoverage {
                region_id: "A".into(),
                entries: vec![CoverageEntry { row: 0, col: 0, fraction: 1.0, area: spec.cell_area(0).unwrap() }],
            }],
        )
        .unwrap();
        let frames = (1..=3)
            .map(|y| Raster::filled(spec, y as f64, Variable::Precipitation, Timestamp::year(2000 + y)))
            .collect();
        let xs = RasterSeries::new(spec, Variable::Precipitation, Frequency::Annual, frames).unwrap();
        let t = aggregate_series(&xs, &cov, &unweighted(&spec)).unwrap();
        assert_eq!(t.row(0), &[Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(t.header().units, "mm");
        assert_eq!(t.header().frequency, Frequency::Annual);
    }

    #[test]
    fn table_validation_and_filter() {
        let h = SeriesHeader::new(Level::L0, Variable::Temperature, WeightKind::Unweighted, None, Frequency::Annual);
        let ts = vec![Timestamp::year(2000), Timestamp::year(2001)];
        assert!(SeriesTable::new(h.clone(), vec!["b".into(), "a".into()], ts.clone(), vec![vec![None; 2]; 2]).is_err());
        assert!(SeriesTable::new(h.clone(), vec!["a".into()], ts.clone(), vec![vec![None; 3]]).is_err());
        let t = SeriesTable::new(
            h,
            vec!["a".into(), "b".into()],
            ts,
            vec![vec![Some(1.0), None], vec![Some(3.0), Some(4.0)]],
        )
        .unwrap();
        let f = t.filter(Some(2001), None, Some(&["b".to_string(), "zz".to_string()]));
        assert_eq!(f.regions(), &["b".to_string()]);
        assert_eq!(f.rows(), &[vec![Some(4.0)]]);
        assert_eq!(t.get("a", &Timestamp::year(2001)), Some(None));
        assert_eq!(t.get("c", &Timestamp::year(2001)), None);
        let json = serde_json::to_string(&t).unwrap();
        let back: SeriesTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
