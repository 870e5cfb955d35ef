//! A small synthetic world for end-to-end tests.
//!
//! 6×6 corner grid of 1° cells spanning lon 0–6, lat 0–6. Country `A` covers
//! lon 0–3 and is split at lat 3 into `A.1` (north) and `A.2` (south).
//! Country `B` covers lon 3–6, lat 0.5–6, so its southern row is half
//! covered; at L1 it has the single child `B.1`.

use serde_json::json;

use crate::catalog::{DatasetKey, DatasetMeta, Source, Store};
use crate::error::Result;
use crate::geom::{build_coverage, parse_geojson, CoverageMatrix, Level, Polygon, Region, RegionSet};
use crate::grid::{Frequency, GridSpec, Raster, RasterSeries, Registration, Timestamp, Variable};
use crate::temporal::{upscale, Stat};
use crate::weights::{downsample_block_mean, nightlight_weight, population_weight, unweighted, WeightGrid, WeightKind};
use crate::zonal::{aggregate_series, SeriesTable};

pub const BASE_YEAR: i32 = 2015;
pub const SOURCE_VERSION: &str = "synthetic-1";
pub const BUILT_AT: &str = "2024-01-01T00:00:00Z";

/// `(region_id, parent_id, lon_w, lat_s, lon_e, lat_n)`.
pub const L0_REGIONS: [(&str, Option<&str>, f64, f64, f64, f64); 2] =
    [("A", None, 0.0, 0.0, 3.0, 6.0), ("B", None, 3.0, 0.5, 6.0, 6.0)];
pub const L1_REGIONS: [(&str, Option<&str>, f64, f64, f64, f64); 3] = [
    ("A.1", Some("A"), 0.0, 3.0, 3.0, 6.0),
    ("A.2", Some("A"), 0.0, 0.0, 3.0, 3.0),
    ("B.1", Some("B"), 3.0, 0.5, 6.0, 6.0),
];

pub fn grid() -> GridSpec {
    GridSpec::new(6, 6, 0.0, 6.0, 1.0, Registration::Corner).expect("valid fixture grid")
}

/// Population density, persons/km²; cell (5, 5) is uninhabited.
pub fn density(row: usize, col: usize) -> f64 {
    if (row, col) == (5, 5) {
        0.0
    } else {
        1.0 + row as f64 + 2.0 * col as f64
    }
}

/// Radiance on the 0.5° grid that block-averages onto [`grid`].
pub fn fine_radiance(frow: usize, fcol: usize) -> f64 {
    ((frow * 7 + fcol * 3) % 5) as f64 + 0.25
}

/// Monthly temperature for frame `t` (0 = 2001-01). Cell (0, 0) is masked in frame 2.
pub fn temperature(row: usize, col: usize, t: usize) -> Option<f64> {
    if (row, col, t) == (0, 0, 2) {
        return None;
    }
    Some(5.0 + 0.75 * row as f64 - 0.5 * col as f64 + ((t % 12) as f64 - 5.5).abs())
}

pub fn precipitation(row: usize, col: usize, t: usize) -> Option<f64> {
    Some((row * 6 + col) as f64 * 0.5 + t as f64)
}

/// Daily temperature for day `d` of 2001. The south half of `A` is masked on day 100.
pub fn daily_temperature(row: usize, col: usize, d: usize) -> Option<f64> {
    if d == 100 && row >= 3 && col < 3 {
        return None;
    }
    let s = (d as f64 - 182.0) / 182.0;
    Some(28.0 - 20.0 * s * s + 0.1 * row as f64 + 0.2 * col as f64 + ((d * 37) % 11) as f64 * 0.01)
}

pub const MONTHS: usize = 24;
pub const DAYS: usize = 365;

fn series(
    spec: GridSpec,
    variable: Variable,
    frequency: Frequency,
    stamps: Vec<Timestamp>,
    f: impl Fn(usize, usize, usize) -> Option<f64>,
) -> RasterSeries {
    let frames = stamps
        .into_iter()
        .enumerate()
        .map(|(t, ts)| {
            let values = (0..spec.n_cells())
                .map(|i| f(i / spec.n_cols(), i % spec.n_cols(), t).unwrap_or(f64::NAN))
                .collect();
            Raster::new(spec, values, variable, ts).expect("fixture raster")
        })
        .collect();
    RasterSeries::new(spec, variable, frequency, frames).expect("fixture series")
}

fn regions(level: Level) -> RegionSet {
    let table: &[(&str, Option<&str>, f64, f64, f64, f64)] = match level {
        Level::L0 => &L0_REGIONS,
        Level::L1 => &L1_REGIONS,
    };
    let regions = table
        .iter()
        .map(|&(id, parent, w, s, e, n)| {
            let r = Region::new(id, id, level, vec![Polygon::rect(w, s, e, n)]);
            match parent {
                Some(p) => r.with_parent(p),
                None => r,
            }
        })
        .collect();
    RegionSet::new(level, regions).expect("fixture regions")
}

/// Boundaries of one level as a GeoJSON FeatureCollection.
pub fn boundaries_geojson(level: Level) -> String {
    let table: &[(&str, Option<&str>, f64, f64, f64, f64)] = match level {
        Level::L0 => &L0_REGIONS,
        Level::L1 => &L1_REGIONS,
    };
    let features: Vec<_> = table
        .iter()
        .map(|&(id, parent, w, s, e, n)| {
            json!({
                "type": "Feature",
                "properties": {"region_id": id, "name": format!("Region {id}"), "level": level.as_str(), "parent_id": parent},
                "geometry": {"type": "Polygon", "coordinates": [[[w, s], [e, s], [e, n], [w, n], [w, s]]]}
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features}).to_string()
}

pub struct SyntheticWorld {
    pub spec: GridSpec,
    pub l0: RegionSet,
    pub l1: RegionSet,
    pub density: Raster,
    pub radiance_fine: Raster,
    /// 2001-01 .. 2002-12.
    pub temperature: RasterSeries,
    pub precipitation: RasterSeries,
    /// Every day of 2001.
    pub daily_temperature: RasterSeries,
}

pub fn synthetic_world() -> SyntheticWorld {
    let spec = grid();
    let density = Raster::new(
        spec,
        (0..spec.n_cells()).map(|i| density(i / 6, i % 6)).collect(),
        Variable::PopulationDensity,
        Timestamp::year(BASE_YEAR),
    )
    .expect("density");
    let fine = GridSpec::new(12, 12, 0.0, 6.0, 0.5, Registration::Corner).expect("fine grid");
    let radiance_fine = Raster::new(
        fine,
        (0..fine.n_cells()).map(|i| fine_radiance(i / 12, i % 12)).collect(),
        Variable::Nightlight,
        Timestamp::year(BASE_YEAR),
    )
    .expect("radiance");
    let months = (0..MONTHS)
        .map(|t| Timestamp::month(2001 + (t / 12) as i32, (t % 12) as u32 + 1).expect("month"))
        .collect::<Vec<_>>();
    let first = chrono::NaiveDate::from_ymd_opt(2001, 1, 1).expect("date");
    let days = (0..DAYS)
        .map(|d| Timestamp::from_date(first + chrono::Days::new(d as u64)))
        .collect();
    SyntheticWorld {
        spec,
        l0: regions(Level::L0),
        l1: regions(Level::L1),
        density,
        radiance_fine,
        temperature: series(spec, Variable::Temperature, Frequency::Monthly, months.clone(), temperature),
        precipitation: series(spec, Variable::Precipitation, Frequency::Monthly, months, precipitation),
        daily_temperature: series(spec, Variable::Temperature, Frequency::Daily, days, daily_temperature),
    }
}

impl SyntheticWorld {
    pub fn regions(&self, level: Level) -> &RegionSet {
        match level {
            Level::L0 => &self.l0,
            Level::L1 => &self.l1,
        }
    }

    pub fn coverage(&self, level: Level) -> CoverageMatrix {
        build_coverage(&self.spec, self.regions(level))
    }

    pub fn weights(&self, kind: WeightKind) -> Result<WeightGrid> {
        match kind {
            WeightKind::Unweighted => Ok(unweighted(&self.spec)),
            WeightKind::Population => population_weight(&self.density, &self.spec, BASE_YEAR),
            WeightKind::Nightlight => nightlight_weight(&downsample_block_mean(&self.radiance_fine, 2)?, BASE_YEAR),
        }
    }

    /// Every dataset the world supports, keyed under ERA5.
    pub fn datasets(&self) -> Result<Vec<(DatasetKey, SeriesTable)>> {
        let mut out = Vec::new();
        for level in [Level::L0, Level::L1] {
            let cov = self.coverage(level);
            for kind in [WeightKind::Unweighted, WeightKind::Population, WeightKind::Nightlight] {
                let w = self.weights(kind)?;
                let base_year = w.base_year();
                let key = |variable, frequency| DatasetKey {
                    source: Source::Era5,
                    variable,
                    level,
                    weighting: kind,
                    base_year,
                    frequency,
                };
                for (xs, stat) in [(&self.temperature, Stat::Mean), (&self.precipitation, Stat::Sum)] {
                    let monthly = aggregate_series(xs, &cov, &w)?;
                    let annual = upscale(&monthly, Frequency::Annual, stat)?;
                    out.push((key(xs.variable(), Frequency::Monthly), monthly));
                    out.push((key(xs.variable(), Frequency::Annual), annual));
                }
                let daily = aggregate_series(&self.daily_temperature, &cov, &w)?;
                out.push((key(Variable::Temperature, Frequency::Daily), daily));
            }
        }
        Ok(out)
    }

    /// Stores every dataset with fixed metadata; returns the stored metadata.
    pub fn populate(&self, store: &Store) -> Result<Vec<DatasetMeta>> {
        self.datasets()?
            .into_iter()
            .map(|(key, table)| {
                let meta = DatasetMeta::with_build_time(key, SOURCE_VERSION, &table, BUILT_AT)?;
                store.store(&table, meta.clone())?;
                Ok(meta)
            })
            .collect()
    }
}

/// Re-parses [`boundaries_geojson`]; equals the in-memory region sets.
pub fn parsed_regions(level: Level) -> Result<RegionSet> {
    parse_geojson(boundaries_geojson(level).as_bytes(), Some(level))
}
