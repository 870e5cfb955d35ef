//! Dataset keys, the on-disk store and wide/long exports.
//!
//! A store directory holds `index.json`, the list of [`DatasetMeta`] sorted by
//! key slug, and one payload per dataset at
//! `objects/<first two hex digits>/<sha256>.json`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::Level;
use crate::grid::{Frequency, Timestamp, Variable};
use crate::weights::{WeightKind, BASE_YEARS};
use crate::zonal::{Measure, SeriesHeader, SeriesTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "CRU")]
    Cru,
    #[serde(rename = "CSIC")]
    Csic,
    #[serde(rename = "ERA5")]
    Era5,
    #[serde(rename = "UDEL")]
    Udel,
    #[serde(rename = "custom")]
    Custom,
}

impl Source {
    pub const PUBLISHED: [Source; 4] = [Source::Cru, Source::Csic, Source::Era5, Source::Udel];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Cru => "CRU",
            Source::Csic => "CSIC",
            Source::Era5 => "ERA5",
            Source::Udel => "UDEL",
            Source::Custom => "custom",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cru" => Ok(Source::Cru),
            "csic" => Ok(Source::Csic),
            "era5" => Ok(Source::Era5),
            "udel" => Ok(Source::Udel),
            "custom" => Ok(Source::Custom),
            _ => Err(Error::Validation(format!("unknown source `{s}`"))),
        }
    }
}

/// Identifies one published dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetKey {
    pub source: Source,
    pub variable: Variable,
    pub level: Level,
    pub weighting: WeightKind,
    pub base_year: Option<i32>,
    pub frequency: Frequency,
}

impl DatasetKey {
    pub fn validate(&self) -> Result<()> {
        match self.variable {
            Variable::Temperature | Variable::Precipitation | Variable::Spei => {}
            v => return Err(Error::Validation(format!("`{v}` is not a catalog variable"))),
        }
        if self.variable == Variable::Spei && (self.source != Source::Csic || self.frequency != Frequency::Monthly) {
            return Err(Error::Validation("spei is only available from CSIC at monthly frequency".into()));
        }
        if self.source == Source::Csic && self.variable != Variable::Spei {
            return Err(Error::Validation("CSIC only provides spei".into()));
        }
        if self.frequency == Frequency::Daily && self.source != Source::Era5 {
            return Err(Error::Validation("daily data are only available from ERA5".into()));
        }
        match (self.weighting, self.base_year) {
            (WeightKind::Unweighted, None) => Ok(()),
            (WeightKind::Unweighted, Some(y)) => {
                Err(Error::Validation(format!("unweighted datasets have no base year, got {y}")))
            }
            (_, None) => Err(Error::Validation(format!("{} weighting needs a base year", self.weighting))),
            (_, Some(y)) if !BASE_YEARS.contains(&y) => {
                Err(Error::Validation(format!("base year {y} is not one of {BASE_YEARS:?}")))
            }
            _ => Ok(()),
        }
    }

    /// Stable file-name-safe identifier, e.g. `era5_temperature_L1_population_2015_daily`.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}_{}_{}_{}_{}",
            self.source.as_str().to_ascii_lowercase(),
            self.variable,
            self.level,
            self.weighting,
            self.base_year.map_or_else(|| "none".to_string(), |y| y.to_string()),
            self.frequency
        )
    }

    /// Whether `header` describes a table that may be stored under this key.
    pub fn matches(&self, header: &SeriesHeader) -> bool {
        header.measure == Measure::Value
            && header.variable == self.variable
            && header.level == self.level
            && header.weighting == self.weighting
            && header.base_year == self.base_year
            && header.frequency == self.frequency
    }
}

impl fmt::Display for DatasetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

/// Every valid key over the four published sources, in a fixed order.
pub fn enumerate_valid_keys() -> Vec<DatasetKey> {
    let variables = [Variable::Temperature, Variable::Precipitation, Variable::Spei];
    let weightings: Vec<(WeightKind, Option<i32>)> = std::iter::once((WeightKind::Unweighted, None))
        .chain(
            [WeightKind::Population, WeightKind::Nightlight]
                .into_iter()
                .flat_map(|k| BASE_YEARS.iter().map(move |&y| (k, Some(y)))),
        )
        .collect();
    let mut keys = Vec::new();
    for source in Source::PUBLISHED {
        for variable in variables {
            for level in [Level::L0, Level::L1] {
                for &(weighting, base_year) in &weightings {
                    for frequency in [Frequency::Daily, Frequency::Monthly, Frequency::Annual] {
                        let key = DatasetKey { source, variable, level, weighting, base_year, frequency };
                        if key.validate().is_ok() {
                            keys.push(key);
                        }
                    }
                }
            }
        }
    }
    keys
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveragePeriod {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub key: DatasetKey,
    pub source_version: String,
    pub period: Option<CoveragePeriod>,
    /// RFC 3339, UTC.
    pub built_at: String,
    /// Hex SHA-256 of the stored payload.
    pub checksum: String,
}

impl DatasetMeta {
    /// Metadata for `table`, stamped with the current time.
    pub fn for_table(key: DatasetKey, source_version: impl Into<String>, table: &SeriesTable) -> Result<Self> {
        let built_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        Self::with_build_time(key, source_version, table, built_at)
    }

    pub fn with_build_time(
        key: DatasetKey,
        source_version: impl Into<String>,
        table: &SeriesTable,
        built_at: impl Into<String>,
    ) -> Result<Self> {
        Ok(Self {
            key,
            source_version: source_version.into(),
            period: table.span().map(|(start, end)| CoveragePeriod { start, end }),
            built_at: built_at.into(),
            checksum: checksum(&payload_bytes(table)?),
        })
    }
}

pub fn payload_bytes(table: &SeriesTable) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(table)?)
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Directory-backed dataset store. Reads need no locking; writes are
/// serialized within the process and land through atomic renames.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    write_lock: Mutex<()>,
}

const INDEX_FILE: &str = "index.json";

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        Ok(Self { root, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, checksum: &str) -> PathBuf {
        let prefix = checksum.get(..2).unwrap_or("xx");
        self.root.join("objects").join(prefix).join(format!("{checksum}.json"))
    }

    /// All stored metadata, sorted by key slug.
    pub fn list(&self) -> Result<Vec<DatasetMeta>> {
        match fs::read(self.root.join(INDEX_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Corruption(format!("unreadable index: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn meta(&self, key: &DatasetKey) -> Result<DatasetMeta> {
        self.list()?
            .into_iter()
            .find(|m| m.key == *key)
            .ok_or_else(|| Error::NotFound(format!("no dataset for {key}")))
    }

    /// Writes the payload and upserts its metadata; returns the key slug.
    pub fn store(&self, table: &SeriesTable, meta: DatasetMeta) -> Result<String> {
        meta.key.validate()?;
        if !meta.key.matches(table.header()) {
            return Err(Error::Validation(format!("table header does not describe {}", meta.key)));
        }
        let bytes = payload_bytes(table)?;
        let sum = checksum(&bytes);
        if sum != meta.checksum {
            return Err(Error::Validation(format!(
                "metadata checksum {} does not match payload {sum}",
                meta.checksum
            )));
        }
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.object_path(&sum);
        if !path.exists() {
            write_atomic(&path, &bytes)?;
        }
        let mut index = self.list()?;
        let slug = meta.key.slug();
        let replaced = match index.iter().position(|m| m.key == meta.key) {
            Some(i) => Some(std::mem::replace(&mut index[i], meta)),
            None => {
                index.push(meta);
                None
            }
        };
        index.sort_by_key(|m| m.key.slug());
        write_atomic(&self.root.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
        if let Some(old) = replaced {
            if old.checksum != sum && index.iter().all(|m| m.checksum != old.checksum) {
                let _ = fs::remove_file(self.object_path(&old.checksum));
            }
        }
        Ok(slug)
    }

    /// Loads a dataset and verifies its checksum.
    pub fn lookup(&self, key: &DatasetKey) -> Result<(SeriesTable, DatasetMeta)> {
        let meta = self.meta(key)?;
        let bytes = match fs::read(self.object_path(&meta.checksum)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Corruption(format!("payload for {key} is missing")))
            }
            Err(e) => return Err(e.into()),
        };
        if checksum(&bytes) != meta.checksum {
            return Err(Error::Corruption(format!("checksum mismatch for {key}")));
        }
        let table: SeriesTable =
            serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("payload for {key}: {e}")))?;
        Ok((table, meta))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("obj"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Wide,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Shape::Wide),
            "long" => Ok(Shape::Long),
            other => Err(Error::Validation(format!("unknown shape `{other}`"))),
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Validation(format!("unknown format `{other}`"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            Format::Csv => "text/csv; charset=utf-8",
            Format::Json => "application/json",
        }
    }
}

/// JSON number for a value; counts are written as integers.
pub fn value_json(measure: Measure, v: Option<f64>) -> Value {
    match v {
        None => Value::Null,
        Some(v) if measure == Measure::ExceedanceDays && v.fract() == 0.0 && v >= 0.0 => Value::from(v as u64),
        Some(v) => Value::from(v),
    }
}

fn value_text(measure: Measure, v: Option<f64>) -> String {
    match v {
        None => String::new(),
        v => value_json(measure, v).to_string(),
    }
}

/// Long-shape JSON records, `{"region_id", "time", "value"}` each.
pub fn long_records<'a>(table: &'a SeriesTable) -> impl Iterator<Item = Value> + 'a {
    let measure = table.header().measure;
    table.records().map(move |r| {
        let mut m = Map::with_capacity(3);
        m.insert("region_id".into(), Value::from(r.region_id));
        m.insert("time".into(), Value::from(r.timestamp.to_string()));
        m.insert("value".into(), value_json(measure, r.value));
        Value::Object(m)
    })
}

/// Wide-shape JSON records: `region_id` then one field per timestamp.
pub fn wide_records<'a>(table: &'a SeriesTable) -> impl Iterator<Item = Value> + 'a {
    let measure = table.header().measure;
    table.regions().iter().zip(table.rows()).map(move |(region, row)| {
        let mut m = Map::with_capacity(row.len() + 1);
        m.insert("region_id".into(), Value::from(region.as_str()));
        for (ts, v) in table.timestamps().iter().zip(row) {
            m.insert(ts.to_string(), value_json(measure, *v));
        }
        Value::Object(m)
    })
}

/// Serializes a table. Regions are in id order, timestamps ascending, missing
/// values are empty CSV cells or JSON `null`.
pub fn export(table: &SeriesTable, shape: Shape, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let records: Vec<Value> = match shape {
                Shape::Long => long_records(table).collect(),
                Shape::Wide => wide_records(table).collect(),
            };
            serde_json::to_vec(&records).expect("json values always serialize")
        }
        Format::Csv => {
            let measure = table.header().measure;
            let mut w = csv::Writer::from_writer(Vec::new());
            let res: std::result::Result<(), csv::Error> = (|| {
                match shape {
                    Shape::Long => {
                        w.write_record(["region_id", "time", "value"])?;
                        for r in table.records() {
                            w.write_record([
                                r.region_id,
                                &r.timestamp.to_string(),
                                &value_text(measure, r.value),
                            ])?;
                        }
                    }
                    Shape::Wide => {
                        let mut head = vec!["region_id".to_string()];
                        head.extend(table.timestamps().iter().map(|t| t.to_string()));
                        w.write_record(&head)?;
                        for (region, row) in table.regions().iter().zip(table.rows()) {
                            let mut rec = vec![region.clone()];
                            rec.extend(row.iter().map(|v| value_text(measure, *v)));
                            w.write_record(&rec)?;
                        }
                    }
                }
                Ok(())
            })();
            res.expect("writing csv to memory cannot fail");
            w.into_inner().expect("in-memory writer")
        }
    }
}

fn parse_value(s: &str, loc: impl Fn() -> String) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| Error::parse(loc(), format!("invalid number `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(loc(), format!("non-finite value `{s}`")));
    }
    Ok(Some(v))
}

fn json_value(v: &Value, loc: impl Fn() -> String) -> Result<Option<f64>> {
    match v {
        Value::Null => Ok(None),
        Value::Number(n) => Ok(n.as_f64()),
        other => Err(Error::parse(loc(), format!("expected number or null, found {other}"))),
    }
}

fn parse_ts(s: &str, loc: impl Fn() -> String) -> Result<Timestamp> {
    s.parse().map_err(|_| Error::parse(loc(), format!("invalid timestamp `{s}`")))
}

/// Inverse of [`export`]; the header is not part of the byte stream.
pub fn import(bytes: &[u8], shape: Shape, format: Format, header: SeriesHeader) -> Result<SeriesTable> {
    let mut records: Vec<(String, Timestamp, Option<f64>)> = Vec::new();
    match (format, shape) {
        (Format::Csv, Shape::Long) => {
            let mut rdr = csv::Reader::from_reader(bytes);
            if rdr.headers()?.iter().collect::<Vec<_>>() != ["region_id", "time", "value"] {
                return Err(Error::parse("line 1", "expected header region_id,time,value"));
            }
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let line = || format!("line {}", i + 2);
                if rec.len() != 3 {
                    return Err(Error::parse(line(), "expected 3 fields"));
                }
                records.push((rec[0].to_string(), parse_ts(&rec[1], line)?, parse_value(&rec[2], line)?));
            }
        }
        (Format::Csv, Shape::Wide) => {
            let mut rdr = csv::Reader::from_reader(bytes);
            let head = rdr.headers()?.clone();
            if head.get(0) != Some("region_id") {
                return Err(Error::parse("line 1", "first column must be region_id"));
            }
            let times = head
                .iter()
                .skip(1)
                .map(|s| parse_ts(s, || "line 1".into()))
                .collect::<Result<Vec<_>>>()?;
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let line = || format!("line {}", i + 2);
                for (k, ts) in times.iter().enumerate() {
                    records.push((rec[0].to_string(), *ts, parse_value(&rec[k + 1], line)?));
                }
            }
        }
        (Format::Json, shape) => {
            let items: Vec<Map<String, Value>> = serde_json::from_slice(bytes)?;
            for (i, obj) in items.iter().enumerate() {
                let loc = || format!("record {i}");
                let region = obj
                    .get("region_id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::parse(loc(), "missing region_id"))?;
                match shape {
                    Shape::Long => {
                        let time = obj
                            .get("time")
                            .and_then(Value::as_str)
                            .ok_or_else(|| Error::parse(loc(), "missing time"))?;
                        let value = obj.get("value").ok_or_else(|| Error::parse(loc(), "missing value"))?;
                        records.push((region.to_string(), parse_ts(time, loc)?, json_value(value, loc)?));
                    }
                    Shape::Wide => {
                        for (k, v) in obj.iter().filter(|(k, _)| k.as_str() != "region_id") {
                            records.push((region.to_string(), parse_ts(k, loc)?, json_value(v, loc)?));
                        }
                    }
                }
            }
        }
    }
    SeriesTable::from_records(header, records)
}
