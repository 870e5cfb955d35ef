//! Administrative boundaries and polygon–cell coverage fractions.
//!
//! Coverage is planar in lon/lat degrees: the fraction of a cell inside a
//! region is the area of the polygon clipped to the cell rectangle divided by
//! the rectangle's area. Sphericity only enters the aggregation through the
//! per-row cell areas stored alongside each fraction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::{CellBounds, GridSpec};
#[cfg(test)]
use crate::grid::Registration;
use crate::sum::NeumaierSum;

pub type Point = [f64; 2];

/// Fractions below this are clipping round-off on shared edges.
const MIN_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L0,
    L1,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::L0 => "L0",
            Level::L1 => "L1",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L0" | "0" | "GADM0" => Ok(Level::L0),
            "L1" | "1" | "GADM1" => Ok(Level::L1),
            other => Err(Error::Validation(format!("unknown level `{other}`"))),
        }
    }
}

/// Signed shoelace area of a closed ring (first vertex repeated last);
/// positive for counter-clockwise rings.
pub fn ring_signed_area(ring: &[Point]) -> f64 {
    if ring.len() < 4 {
        return 0.0;
    }
    let [ox, oy] = ring[0];
    let mut acc = NeumaierSum::new();
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        acc.add((a[0] - ox) * (b[1] - oy) - (b[0] - ox) * (a[1] - oy));
    }
    acc.value() / 2.0
}

/// Shoelace area of an open vertex list relative to `origin`.
fn open_ring_area(ring: &[Point], origin: Point) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = NeumaierSum::new();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc.add((a[0] - origin[0]) * (b[1] - origin[1]) - (b[0] - origin[0]) * (a[1] - origin[1]));
    }
    acc.value() / 2.0
}

/// A polygon with one outer ring and zero or more holes. Rings are closed;
/// the outer ring is counter-clockwise and holes are clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
}

impl Polygon {
    /// Builds a polygon, closing open rings and normalizing orientation.
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Self {
        let mut exterior = close_ring(exterior);
        if ring_signed_area(&exterior) < 0.0 {
            exterior.reverse();
        }
        let holes = holes
            .into_iter()
            .map(|h| {
                let mut h = close_ring(h);
                if ring_signed_area(&h) > 0.0 {
                    h.reverse();
                }
                h
            })
            .collect();
        Self { exterior, holes }
    }

    pub fn rect(lon_w: f64, lat_s: f64, lon_e: f64, lat_n: f64) -> Self {
        Self::new(vec![[lon_w, lat_s], [lon_e, lat_s], [lon_e, lat_n], [lon_w, lat_n]], Vec::new())
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// Planar area in degrees²: outer ring minus holes.
    pub fn area(&self) -> f64 {
        ring_signed_area(&self.exterior).abs() - self.holes.iter().map(|h| ring_signed_area(h).abs()).sum::<f64>()
    }

    /// `(lon_min, lat_min, lon_max, lat_max)` of the outer ring.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        bbox(&self.exterior)
    }

    fn shifted(&self, dx: f64) -> Self {
        let shift = |r: &Vec<Point>| r.iter().map(|p| [p[0] + dx, p[1]]).collect();
        Self {
            exterior: shift(&self.exterior),
            holes: self.holes.iter().map(shift).collect(),
        }
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Point) -> bool {
        self.rings().filter(|r| ring_crosses_right(r, p)).count() % 2 == 1
    }
}

fn close_ring(mut ring: Vec<Point>) -> Vec<Point> {
    if let (Some(first), Some(last)) = (ring.first().copied(), ring.last().copied()) {
        if first != last {
            ring.push(first);
        }
    }
    ring
}

fn bbox(ring: &[Point]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
    )
}

/// Whether a ray from `p` towards +x crosses the closed ring an odd number of times.
fn ring_crosses_right(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// An administrative unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub name: String,
    pub level: Level,
    pub parent_id: Option<String>,
    pub polygons: Vec<Polygon>,
}

impl Region {
    pub fn new(region_id: impl Into<String>, name: impl Into<String>, level: Level, polygons: Vec<Polygon>) -> Self {
        Self {
            region_id: region_id.into(),
            name: name.into(),
            level,
            parent_id: None,
            polygons,
        }
    }

    pub fn with_parent(mut self, parent_id: impl Into<String>) -> Self {
        self.parent_id = Some(parent_id.into());
        self
    }

    /// Planar shoelace area in degrees².
    pub fn area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }
}

/// Regions of one administrative level with unique identifiers.
#[derive(Debug, Clone)]
pub struct RegionSet {
    level: Level,
    regions: Vec<Region>,
    index: HashMap<String, usize>,
}

impl RegionSet {
    pub fn new(level: Level, regions: Vec<Region>) -> Result<Self> {
        let mut index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            if r.level != level {
                return Err(Error::Validation(format!(
                    "region `{}` is {} but the set is {level}",
                    r.region_id, r.level
                )));
            }
            if r.level == Level::L1 && r.parent_id.is_none() {
                return Err(Error::Validation(format!("L1 region `{}` has no parent_id", r.region_id)));
            }
            if index.insert(r.region_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate region_id `{}`", r.region_id)));
            }
        }
        Ok(Self { level, regions, index })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn get(&self, region_id: &str) -> Option<&Region> {
        self.index.get(region_id).map(|&i| &self.regions[i])
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

// ---------------------------------------------------------------------------
// GeoJSON
// ---------------------------------------------------------------------------

/// Parses a FeatureCollection of Polygon/MultiPolygon features.
///
/// With `level = None` every feature must share one level; otherwise only
/// features of that level are kept.
pub fn parse_geojson<R: Read>(input: R, level: Option<Level>) -> Result<RegionSet> {
    let doc: Value = serde_json::from_reader(input)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse("document", "expected a FeatureCollection with a `features` array"))?;

    let mut regions = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut set_level = level;
    for (fi, feature) in features.iter().enumerate() {
        let gerr = |message: String| Error::Geometry { feature: fi, message };
        let props = feature
            .get("properties")
            .and_then(Value::as_object)
            .ok_or_else(|| gerr("missing properties".into()))?;
        let region_id = props
            .get("region_id")
            .and_then(Value::as_str)
            .ok_or_else(|| gerr("missing region_id".into()))?
            .to_string();
        if region_id.is_empty() || region_id.chars().any(char::is_whitespace) {
            return Err(gerr(format!("region_id `{region_id}` must be non-empty without whitespace")));
        }
        let feature_level: Level = match props.get("level") {
            Some(Value::String(s)) => s.parse().map_err(|e: Error| gerr(e.to_string()))?,
            Some(Value::Number(n)) => n.to_string().parse().map_err(|e: Error| gerr(e.to_string()))?,
            _ => return Err(gerr(format!("region `{region_id}` has no level"))),
        };
        match set_level {
            Some(l) if l != feature_level => {
                if level.is_some() {
                    continue;
                }
                return Err(gerr(format!("mixed levels: {feature_level} after {l}")));
            }
            None => set_level = Some(feature_level),
            _ => {}
        }
        if !seen.insert(region_id.clone()) {
            return Err(gerr(format!("duplicate region_id `{region_id}`")));
        }
        let name = props
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or(&region_id)
            .to_string();
        let parent_id = props.get("parent_id").and_then(Value::as_str).map(str::to_string);
        if feature_level == Level::L1 && parent_id.is_none() {
            return Err(gerr(format!("L1 region `{region_id}` has no parent_id")));
        }

        let geometry = feature.get("geometry").unwrap_or(&Value::Null);
        let polygons = if geometry.is_null() {
            Vec::new()
        } else {
            parse_geometry(geometry).map_err(gerr)?
        };
        if polygons.is_empty() {
            log::warn!("feature {fi} (`{region_id}`) has empty geometry");
        }
        regions.push(Region {
            region_id,
            name,
            level: feature_level,
            parent_id,
            polygons,
        });
    }
    RegionSet::new(set_level.unwrap_or(Level::L0), regions)
}

fn parse_geometry(geometry: &Value) -> std::result::Result<Vec<Polygon>, String> {
    let kind = geometry.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = geometry.get("coordinates").ok_or("geometry has no coordinates")?;
    let polys: Vec<&Value> = match kind {
        "Polygon" => vec![coords],
        "MultiPolygon" => coords.as_array().ok_or("MultiPolygon coordinates must be an array")?.iter().collect(),
        other => return Err(format!("unsupported geometry type `{other}`")),
    };
    let mut out = Vec::new();
    for (pi, poly) in polys.into_iter().enumerate() {
        let rings = poly.as_array().ok_or_else(|| format!("polygon {pi}: rings must be an array"))?;
        let mut parsed = Vec::with_capacity(rings.len());
        for (ri, ring) in rings.iter().enumerate() {
            parsed.push(parse_ring(ring).map_err(|e| format!("polygon {pi} ring {ri}: {e}"))?);
        }
        let mut iter = parsed.into_iter();
        let Some(exterior) = iter.next() else { continue };
        if is_degenerate(&exterior) {
            log::warn!("dropping degenerate polygon {pi}");
            continue;
        }
        let holes = iter
            .filter(|h| {
                let bad = is_degenerate(h);
                if bad {
                    log::warn!("dropping degenerate hole in polygon {pi}");
                }
                !bad
            })
            .collect();
        out.push(Polygon::new(exterior, holes));
    }
    Ok(out)
}

fn parse_ring(ring: &Value) -> std::result::Result<Vec<Point>, String> {
    let positions = ring.as_array().ok_or("ring must be an array of positions")?;
    let mut pts = Vec::with_capacity(positions.len());
    for pos in positions {
        let xy = pos.as_array().filter(|a| a.len() >= 2).ok_or("position must have two coordinates")?;
        let lon = xy[0].as_f64().ok_or("non-numeric longitude")?;
        let lat = xy[1].as_f64().ok_or("non-numeric latitude")?;
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(format!("position ({lon}, {lat}) outside lon/lat range"));
        }
        pts.push([lon, lat]);
    }
    if pts.len() < 2 || pts.first() != pts.last() {
        return Err("unclosed ring".into());
    }
    for w in pts.windows(2) {
        if (w[1][0] - w[0][0]).abs() > 180.0 {
            return Err(format!(
                "longitude jump from {} to {} crosses the antimeridian; split the ring at ±180°",
                w[0][0], w[1][0]
            ));
        }
    }
    Ok(pts)
}

fn is_degenerate(ring: &[Point]) -> bool {
    let mut distinct: Vec<Point> = Vec::new();
    for p in &ring[..ring.len().saturating_sub(1)] {
        if !distinct.contains(p) {
            distinct.push(*p);
            if distinct.len() >= 3 {
                break;
            }
        }
    }
    distinct.len() < 3 || ring_signed_area(ring) == 0.0
}

// ---------------------------------------------------------------------------
// Clipping
// ---------------------------------------------------------------------------

/// Sutherland–Hodgman pass against an axis-aligned half-plane.
/// `axis` 0 clips on longitude, 1 on latitude; `keep_above` keeps `p[axis] >= bound`.
fn clip_half_plane(poly: &[Point], axis: usize, bound: f64, keep_above: bool, out: &mut Vec<Point>) {
    out.clear();
    let n = poly.len();
    if n == 0 {
        return;
    }
    let inside = |p: &Point| if keep_above { p[axis] >= bound } else { p[axis] <= bound };
    let other = 1 - axis;
    for i in 0..n {
        let s = poly[i];
        let e = poly[(i + 1) % n];
        let (s_in, e_in) = (inside(&s), inside(&e));
        if s_in != e_in {
            let t = (bound - s[axis]) / (e[axis] - s[axis]);
            let mut p = [0.0; 2];
            p[axis] = bound;
            p[other] = s[other] + t * (e[other] - s[other]);
            out.push(p);
        }
        if e_in {
            out.push(e);
        }
    }
}

/// Clips an open vertex list to the latitude band `[lat_s, lat_n]`.
fn clip_band(poly: &[Point], lat_s: f64, lat_n: f64) -> Vec<Point> {
    let mut a = Vec::with_capacity(poly.len() + 4);
    let mut b = Vec::with_capacity(poly.len() + 4);
    clip_half_plane(poly, 1, lat_s, true, &mut a);
    clip_half_plane(&a, 1, lat_n, false, &mut b);
    b
}

/// Area of an open vertex list clipped to the longitude band `[lon_w, lon_e]`,
/// measured relative to `origin`.
fn clipped_column_area(strip: &[Point], lon_w: f64, lon_e: f64, origin: Point, scratch: &mut [Vec<Point>; 2]) -> f64 {
    let [a, b] = scratch;
    clip_half_plane(strip, 0, lon_w, true, a);
    clip_half_plane(a, 0, lon_e, false, b);
    open_ring_area(b, origin).abs()
}

fn open(ring: &[Point]) -> &[Point] {
    &ring[..ring.len().saturating_sub(1)]
}

/// Planar area (degrees²) of `polygon ∩ cell`, holes subtracted.
pub fn clip_area(polygon: &Polygon, cell: &CellBounds) -> f64 {
    let origin = [cell.lon_w, cell.lat_s];
    let mut scratch = [Vec::new(), Vec::new()];
    let mut area = 0.0;
    for (k, ring) in polygon.rings().enumerate() {
        let strip = clip_band(open(ring), cell.lat_s, cell.lat_n);
        if strip.len() < 3 {
            continue;
        }
        let a = clipped_column_area(&strip, cell.lon_w, cell.lon_e, origin, &mut scratch);
        if k == 0 {
            area += a;
        } else {
            area -= a;
        }
    }
    area.clamp(0.0, cell.planar_area())
}

/// Share of cell `(row, col)` lying inside `region`, in `[0, 1]`.
pub fn coverage_fraction(region: &Region, spec: &GridSpec, row: usize, col: usize) -> Result<f64> {
    let cell = spec.cell_bounds(row, col)?;
    let planar = cell.planar_area();
    if planar <= 0.0 {
        return Ok(0.0);
    }
    let mut area = 0.0;
    for shift in spec.wrap_shifts() {
        for poly in &region.polygons {
            if shift == 0.0 {
                area += clip_area(poly, &cell);
            } else {
                area += clip_area(&poly.shifted(shift), &cell);
            }
        }
    }
    let f = (area / planar).clamp(0.0, 1.0);
    Ok(if f < MIN_FRACTION { 0.0 } else { f })
}

// ---------------------------------------------------------------------------
// Coverage matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageEntry {
    pub row: u32,
    pub col: u32,
    /// Share of the cell inside the region, in `(0, 1]`.
    pub fraction: f64,
    /// Spherical cell area, km².
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCoverage {
    pub region_id: String,
    /// Row-major ascending.
    pub entries: Vec<CoverageEntry>,
}

/// Sparse region → cells mapping, regions sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    spec: GridSpec,
    level: Level,
    regions: Vec<RegionCoverage>,
}

impl CoverageMatrix {
    pub fn new(spec: GridSpec, level: Level, mut regions: Vec<RegionCoverage>) -> Result<Self> {
        regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        for w in regions.windows(2) {
            if w[0].region_id == w[1].region_id {
                return Err(Error::Validation(format!("duplicate region_id `{}`", w[0].region_id)));
            }
        }
        for rc in &mut regions {
            rc.entries.sort_by_key(|e| (e.row, e.col));
            for e in &rc.entries {
                if e.row as usize >= spec.n_rows() || e.col as usize >= spec.n_cols() {
                    return Err(Error::Index(format!(
                        "region `{}` references cell ({}, {})",
                        rc.region_id, e.row, e.col
                    )));
                }
                if !(e.fraction > 0.0 && e.fraction <= 1.0) {
                    return Err(Error::Validation(format!(
                        "region `{}` has fraction {} at ({}, {})",
                        rc.region_id, e.fraction, e.row, e.col
                    )));
                }
            }
        }
        Ok(Self { spec, level, regions })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn regions(&self) -> &[RegionCoverage] {
        &self.regions
    }

    pub fn get(&self, region_id: &str) -> Option<&RegionCoverage> {
        self.regions
            .binary_search_by(|r| r.region_id.as_str().cmp(region_id))
            .ok()
            .map(|i| &self.regions[i])
    }

    pub fn region_ids(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.region_id.as_str())
    }

    /// Writes the cache file: a header echoing the spec, then per region a
    /// `region=<id> cells=<k>` line followed by `region_id row col f a` lines.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::from("coverage_matrix v1\n");
        for kv in self.spec.to_inline().split(',') {
            s.push_str(kv);
            s.push('\n');
        }
        s.push_str(&format!("level={}\nregions={}\n", self.level, self.regions.len()));
        out.write_all(s.as_bytes())?;
        for rc in &self.regions {
            writeln!(out, "region={} cells={}", rc.region_id, rc.entries.len())?;
            for e in &rc.entries {
                writeln!(out, "{} {} {} {} {}", rc.region_id, e.row, e.col, e.fraction, e.area)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_cache(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_cache<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::parse("end of file", format!("expected {what}"))),
            }
        };
        let (n, magic) = next("header")?;
        if magic.trim() != "coverage_matrix v1" {
            return Err(Error::parse(format!("line {n}"), "not a coverage matrix cache"));
        }
        let mut spec_text = String::new();
        for _ in 0..6 {
            spec_text.push_str(&next("grid spec")?.1);
            spec_text.push(',');
        }
        let spec: GridSpec = spec_text.parse()?;
        let field = |line: &(usize, String), key: &str| -> Result<String> {
            line.1
                .trim()
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::parse(format!("line {}", line.0), format!("expected `{key}=`")))
        };
        let level_line = next("level")?;
        let level: Level = field(&level_line, "level")?.parse()?;
        let count_line = next("regions")?;
        let count: usize = field(&count_line, "regions")?
            .parse()
            .map_err(|_| Error::parse(format!("line {}", count_line.0), "invalid region count"))?;

        let mut regions = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("region line")?;
            let loc = format!("line {n}");
            let (id_part, cells_part) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| Error::parse(&loc, "expected `region=<id> cells=<k>`"))?;
            let region_id = id_part
                .strip_prefix("region=")
                .ok_or_else(|| Error::parse(&loc, "expected `region=`"))?
                .to_string();
            let cells: usize = cells_part
                .strip_prefix("cells=")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::parse(&loc, "expected `cells=<k>`"))?;
            let mut entries = Vec::with_capacity(cells);
            for _ in 0..cells {
                let (n, line) = next("coverage entry")?;
                let loc = format!("line {n}");
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 5 || toks[0] != region_id {
                    return Err(Error::parse(&loc, format!("expected `{region_id} row col f a`")));
                }
                let bad = |t: &str| Error::parse(&loc, format!("invalid number `{t}`"));
                entries.push(CoverageEntry {
                    row: toks[1].parse().map_err(|_| bad(toks[1]))?,
                    col: toks[2].parse().map_err(|_| bad(toks[2]))?,
                    fraction: toks[3].parse().map_err(|_| bad(toks[3]))?,
                    area: toks[4].parse().map_err(|_| bad(toks[4]))?,
                });
            }
            regions.push(RegionCoverage { region_id, entries });
        }
        for (n, line) in lines {
            if !line?.trim().is_empty() {
                return Err(Error::parse(format!("line {}", n + 1), "trailing data"));
            }
        }
        Self::new(spec, level, regions)
    }
}

/// Computes coverage of every region in `regions` on `spec`.
///
/// Regions are processed in parallel; each region's cells come from a
/// row-major scan, so the result does not depend on the worker count.
pub fn build_coverage(spec: &GridSpec, regions: &RegionSet) -> CoverageMatrix {
    let row_areas = spec.row_areas();
    let coverages: Vec<RegionCoverage> = regions
        .regions()
        .par_iter()
        .map(|region| {
            if region.is_empty() {
                log::warn!("region `{}` has no geometry; it covers no cells", region.region_id);
            }
            let areas = region_cell_areas(spec, region);
            let entries = areas
                .into_iter()
                .filter_map(|((row, col), area)| {
                    let planar = spec.bounds_unchecked(row, col).planar_area();
                    let f = (area / planar).clamp(0.0, 1.0);
                    (f >= MIN_FRACTION).then(|| CoverageEntry {
                        row: row as u32,
                        col: col as u32,
                        fraction: f,
                        area: row_areas[row],
                    })
                })
                .collect();
            RegionCoverage {
                region_id: region.region_id.clone(),
                entries,
            }
        })
        .collect();
    CoverageMatrix::new(*spec, regions.level(), coverages).expect("region ids are unique and cells in range")
}

/// Clipped planar area per cell for one region, keyed row-major.
fn region_cell_areas(spec: &GridSpec, region: &Region) -> BTreeMap<(usize, usize), f64> {
    let mut acc: BTreeMap<(usize, usize), NeumaierSum> = BTreeMap::new();
    let (gx0, gx1) = (spec.outer_west(), spec.outer_east());
    let (gy0, gy1) = (spec.lat_edge(spec.n_rows()), spec.lat_edge(0));
    for shift in spec.wrap_shifts() {
        for poly in &region.polygons {
            let (x0, y0, x1, y1) = poly.bbox();
            if x1 + shift <= gx0 || x0 + shift >= gx1 || y1 <= gy0 || y0 >= gy1 {
                continue;
            }
            let shifted;
            let poly = if shift == 0.0 {
                poly
            } else {
                shifted = poly.shifted(shift);
                &shifted
            };
            polygon_cell_areas(spec, poly, &mut acc);
        }
    }
    acc.into_iter().map(|(k, v)| (k, v.value())).collect()
}

/// Scans one polygon row by row.
///
/// Within a row, cells crossed by a polygon edge are clipped exactly; every
/// other cell lies wholly inside or outside, decided by a crossing-parity
/// scan along the row's center line.
fn polygon_cell_areas(spec: &GridSpec, poly: &Polygon, acc: &mut BTreeMap<(usize, usize), NeumaierSum>) {
    let cs = spec.cell_size();
    let pad = cs * 1e-9;
    let n_rows = spec.n_rows();
    let n_cols = spec.n_cols();
    let (_, y0, _, y1) = poly.bbox();

    let row_of = |lat: f64| ((spec.outer_north() - lat) / cs).floor();
    let col_of = |lon: f64| ((lon - spec.outer_west()) / cs).floor();
    let clamp_row = |r: f64| r.clamp(0.0, (n_rows - 1) as f64) as usize;
    let clamp_col = |c: f64| c.clamp(0.0, (n_cols - 1) as f64) as usize;
    let r_lo = clamp_row(row_of(y1 + pad) - 1.0);
    let r_hi = clamp_row(row_of(y0 - pad) + 1.0);

    // Bucket every ring segment by the rows its latitude span touches.
    let segments: Vec<(Point, Point)> = poly
        .rings()
        .flat_map(|r| r.windows(2).map(|w| (w[0], w[1])))
        .collect();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); r_hi - r_lo + 1];
    for (i, (a, b)) in segments.iter().enumerate() {
        let top = clamp_row(row_of(a[1].max(b[1]) + pad));
        let bottom = clamp_row(row_of(a[1].min(b[1]) - pad));
        for r in top.max(r_lo)..=bottom.min(r_hi) {
            buckets[r - r_lo].push(i);
        }
    }

    let rings: Vec<&[Point]> = poly.rings().map(open).collect();
    let mut touched = vec![false; n_cols];
    let mut crossings = Vec::new();
    let mut scratch = [Vec::new(), Vec::new()];

    for row in r_lo..=r_hi {
        let lat_n = spec.lat_edge(row);
        let lat_s = spec.lat_edge(row + 1);
        if lat_n <= lat_s || y1 <= lat_s || y0 >= lat_n {
            continue;
        }
        let strips: Vec<Vec<Point>> = rings.iter().map(|r| clip_band(r, lat_s, lat_n)).collect();
        if strips[0].len() < 3 {
            continue;
        }
        let (sx0, _, sx1, _) = bbox(&strips[0]);
        let c_lo = clamp_col(col_of(sx0 - pad));
        let c_hi = clamp_col(col_of(sx1 + pad));
        if sx1 <= spec.lon_edge(c_lo) || sx0 >= spec.lon_edge(c_hi + 1) {
            continue;
        }

        // Columns touched by polygon boundary inside this band (closed).
        touched[c_lo..=c_hi].iter_mut().for_each(|t| *t = false);
        crossings.clear();
        let y_mid = 0.5 * (lat_s + lat_n);
        for &si in &buckets[row - r_lo] {
            let (a, b) = segments[si];
            let (ylo, yhi) = (a[1].min(b[1]), a[1].max(b[1]));
            if yhi < lat_s - pad || ylo > lat_n + pad {
                continue;
            }
            let (xa, xb) = if a[1] == b[1] {
                (a[0], b[0])
            } else {
                let at = |y: f64| {
                    let t = ((y - a[1]) / (b[1] - a[1])).clamp(0.0, 1.0);
                    a[0] + t * (b[0] - a[0])
                };
                (at(lat_s), at(lat_n))
            };
            let lo = clamp_col(col_of(xa.min(xb) - pad));
            let hi = clamp_col(col_of(xa.max(xb) + pad));
            for t in &mut touched[lo.max(c_lo)..=hi.min(c_hi)] {
                *t = true;
            }
            if (a[1] > y_mid) != (b[1] > y_mid) {
                crossings.push(a[0] + (y_mid - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        crossings.sort_by(f64::total_cmp);

        let cell_h = lat_n - lat_s;
        let mut k = 0;
        for col in c_lo..=c_hi {
            let lon_w = spec.lon_edge(col);
            let lon_e = spec.lon_edge(col + 1);
            let area = if touched[col] {
                let origin = [lon_w, lat_s];
                let mut a = 0.0;
                for (ri, strip) in strips.iter().enumerate() {
                    if strip.len() < 3 {
                        continue;
                    }
                    let part = clipped_column_area(strip, lon_w, lon_e, origin, &mut scratch);
                    if ri == 0 {
                        a += part;
                    } else {
                        a -= part;
                    }
                }
                a.clamp(0.0, (lon_e - lon_w) * cell_h)
            } else {
                let x_mid = 0.5 * (lon_w + lon_e);
                while k < crossings.len() && crossings[k] < x_mid {
                    k += 1;
                }
                if k % 2 == 1 {
                    (lon_e - lon_w) * cell_h
                } else {
                    0.0
                }
            };
            if area > 0.0 {
                acc.entry((row, col)).or_default().add(area);
            }
        }
    }
}
