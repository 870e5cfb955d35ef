//! Frequency conversion and exceedance-day counting on region tables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frequency, Timestamp, Variable};
use crate::sum::NeumaierSum;
use crate::zonal::{Measure, SeriesTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    Sum,
}

impl Stat {
    /// Mean for intensive variables, sum for precipitation.
    pub fn default_for(variable: Variable) -> Stat {
        match variable {
            Variable::Precipitation => Stat::Sum,
            _ => Stat::Mean,
        }
    }
}

impl FromStr for Stat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Stat::Mean),
            "sum" => Ok(Stat::Sum),
            other => Err(Error::Validation(format!("unknown statistic `{other}`"))),
        }
    }
}

/// Groups rows by calendar month or year and reduces each group.
///
/// A group is missing unless every calendar member is present and non-missing,
/// so a year with eleven stored months is missing too.
pub fn upscale(table: &SeriesTable, target: Frequency, stat: Stat) -> Result<SeriesTable> {
    let header = table.header();
    if header.variable == Variable::Spei {
        return Err(Error::UnsupportedVariable(
            "spei is only published monthly and cannot be aggregated in time".into(),
        ));
    }
    if target <= header.frequency {
        return Err(Error::Frequency(format!(
            "cannot upscale {} data to {target}",
            header.frequency
        )));
    }
    let source = header.frequency;
    let mut groups: BTreeMap<Timestamp, Vec<usize>> = BTreeMap::new();
    for (t, ts) in table.timestamps().iter().enumerate() {
        let key = ts.truncate(target).expect("target is coarser");
        groups.entry(key).or_default().push(t);
    }
    let groups: Vec<(Timestamp, Vec<usize>)> = groups.into_iter().collect();
    let values = table
        .rows()
        .par_iter()
        .map(|row| {
            groups
                .iter()
                .map(|(key, members)| {
                    if Some(members.len()) != key.members(source) {
                        return None;
                    }
                    let mut acc = NeumaierSum::new();
                    for &t in members {
                        acc.add(row[t]?);
                    }
                    Some(match stat {
                        Stat::Sum => acc.value(),
                        Stat::Mean => acc.value() / members.len() as f64,
                    })
                })
                .collect()
        })
        .collect();
    let mut out_header = header.clone();
    out_header.frequency = target;
    SeriesTable::new(
        out_header,
        table.regions().to_vec(),
        groups.iter().map(|(k, _)| *k).collect(),
        values,
    )
}

/// Linear interpolation between order statistics at rank `q·(n−1)`.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("sample contains NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q))
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Absolute,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Month,
    Year,
}

impl Period {
    pub fn frequency(self) -> Frequency {
        match self {
            Period::Month => Frequency::Monthly,
            Period::Year => Frequency::Annual,
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(ThresholdMode::Absolute),
            "quantile" => Ok(ThresholdMode::Quantile),
            other => Err(Error::Validation(format!("unknown threshold mode `{other}`"))),
        }
    }
}

impl FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "month" => Ok(Period::Month),
            "year" => Ok(Period::Year),
            other => Err(Error::Validation(format!("unknown period `{other}`"))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Absolute => "absolute",
            ThresholdMode::Quantile => "quantile",
        })
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Period::Month => "month",
            Period::Year => "year",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub mode: ThresholdMode,
    /// Variable units for `absolute`, a level in `[0, 1]` for `quantile`.
    pub value: f64,
    pub period: Period,
}

impl ThresholdSpec {
    pub fn new(mode: ThresholdMode, value: f64, period: Period) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Validation(format!("threshold {value} is not finite")));
        }
        if mode == ThresholdMode::Quantile && !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation(format!("quantile level {value} outside [0, 1]")));
        }
        Ok(Self { mode, value, period })
    }

    pub fn absolute(value: f64, period: Period) -> Result<Self> {
        Self::new(ThresholdMode::Absolute, value, period)
    }

    pub fn quantile(q: f64, period: Period) -> Result<Self> {
        Self::new(ThresholdMode::Quantile, q, period)
    }
}

/// Days per month or year on which a region's value is strictly above the
/// threshold.
///
/// In quantile mode each region's threshold comes from its whole daily record.
/// Missing days neither count nor enter that record. A region with no data at
/// all gets missing counts.
pub fn count_exceedance_days(daily: &SeriesTable, spec: &ThresholdSpec) -> Result<SeriesTable> {
    let header = daily.header();
    if header.frequency != Frequency::Daily {
        return Err(Error::Frequency(format!("exceedance counts need daily data, got {}", header.frequency)));
    }
    let spec = ThresholdSpec::new(spec.mode, spec.value, spec.period)?;
    let target = spec.period.frequency();
    let mut periods: Vec<Timestamp> = Vec::new();
    let mut slot = Vec::with_capacity(daily.timestamps().len());
    for ts in daily.timestamps() {
        let p = ts.truncate(target).expect("daily truncates to any period");
        if periods.last() != Some(&p) {
            periods.push(p);
        }
        slot.push(periods.len() - 1);
    }
    let values = daily
        .rows()
        .par_iter()
        .map(|row| {
            let threshold = match spec.mode {
                ThresholdMode::Absolute => spec.value,
                ThresholdMode::Quantile => {
                    let mut present: Vec<f64> = row.iter().flatten().copied().collect();
                    if present.is_empty() {
                        return vec![None; periods.len()];
                    }
                    present.sort_by(f64::total_cmp);
                    quantile_sorted(&present, spec.value)
                }
            };
            let mut counts = vec![0u32; periods.len()];
            for (t, v) in row.iter().enumerate() {
                if matches!(v, Some(v) if *v > threshold) {
                    counts[slot[t]] += 1;
                }
            }
            counts.into_iter().map(|c| Some(f64::from(c))).collect()
        })
        .collect();
    let mut out_header = header.clone();
    out_header.frequency = target;
    out_header.measure = Measure::ExceedanceDays;
    out_header.units = "days".into();
    SeriesTable::new(out_header, daily.regions().to_vec(), periods, values)
}
