//! Query-string parameters shared by the data endpoints.

use std::str::FromStr;

use zonalclim_core::catalog::{DatasetKey, Format, Shape, Source};
use zonalclim_core::grid::Timestamp;
use zonalclim_core::temporal::{Period, ThresholdMode, ThresholdSpec};

use crate::error::ApiError;

pub const DEFAULT_LIMIT: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryParams {
    pub key: DatasetKey,
    pub year_start: Option<i32>,
    pub year_end: Option<i32>,
    pub region_ids: Option<Vec<String>>,
    pub threshold: Option<ThresholdSpec>,
    pub shape: Shape,
    pub format: Format,
    pub time: Option<Timestamp>,
    pub n: Option<usize>,
    pub offset: usize,
    pub limit: usize,
}

const KNOWN: &[&str] = &[
    "source",
    "variable",
    "level",
    "weighting",
    "base_year",
    "frequency",
    "year_start",
    "year_end",
    "region_ids",
    "mode",
    "value",
    "period",
    "shape",
    "format",
    "time",
    "n",
    "offset",
    "limit",
];

struct Pairs(Vec<(String, String)>);

impl Pairs {
    fn last(&self, name: &str) -> Option<&str> {
        self.0.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn required(&self, name: &str) -> Result<&str, ApiError> {
        self.last(name)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| ApiError::bad_request(format!("missing parameter `{name}`")))
    }

    fn parsed<T: FromStr>(&self, name: &str) -> Result<Option<T>, ApiError> {
        match self.last(name) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ApiError::bad_request(format!("invalid value `{v}` for `{name}`"))),
        }
    }

    fn parsed_required<T: FromStr>(&self, name: &str) -> Result<T, ApiError> {
        let v = self.required(name)?;
        v.parse()
            .map_err(|_| ApiError::bad_request(format!("invalid value `{v}` for `{name}`")))
    }
}

impl QueryParams {
    pub fn parse(raw: Option<&str>) -> Result<Self, ApiError> {
        let pairs = Pairs(
            form_urlencoded::parse(raw.unwrap_or("").as_bytes())
                .map(|(k, v)| (k.into_owned(), v.into_owned()))
                .collect(),
        );
        if let Some((k, _)) = pairs.0.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(ApiError::bad_request(format!("unknown parameter `{k}`")));
        }
        let base_year = match pairs.last("base_year") {
            None | Some("") | Some("none") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| ApiError::bad_request(format!("invalid value `{v}` for `base_year`")))?,
            ),
        };
        let key = DatasetKey {
            source: pairs.parsed_required::<Source>("source")?,
            variable: pairs.parsed_required("variable")?,
            level: pairs.parsed_required("level")?,
            weighting: pairs.parsed_required("weighting")?,
            base_year,
            frequency: pairs.parsed_required("frequency")?,
        };
        key.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;

        let year_start: Option<i32> = pairs.parsed("year_start")?;
        let year_end: Option<i32> = pairs.parsed("year_end")?;
        if let (Some(s), Some(e)) = (year_start, year_end) {
            if s > e {
                return Err(ApiError::bad_request(format!("year_start {s} is after year_end {e}")));
            }
        }

        let ids: Vec<String> = pairs
            .0
            .iter()
            .filter(|(k, _)| k == "region_ids")
            .flat_map(|(_, v)| v.split(','))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let region_ids = pairs.last("region_ids").is_some().then_some(ids);

        let mode: Option<ThresholdMode> = pairs.parsed("mode")?;
        let value: Option<f64> = pairs.parsed("value")?;
        let period: Option<Period> = pairs.parsed("period")?;
        let threshold = match (mode, value, period) {
            (None, None, None) => None,
            (Some(mode), Some(value), period) => Some(
                ThresholdSpec::new(mode, value, period.unwrap_or(Period::Year))
                    .map_err(|e| ApiError::bad_request(e.to_string()))?,
            ),
            _ => return Err(ApiError::bad_request("a threshold needs both `mode` and `value`")),
        };

        Ok(Self {
            key,
            year_start,
            year_end,
            region_ids,
            threshold,
            shape: pairs.parsed("shape")?.unwrap_or(Shape::Long),
            format: pairs.parsed("format")?.unwrap_or(Format::Csv),
            time: pairs.parsed("time")?,
            n: pairs.parsed("n")?,
            offset: pairs.parsed("offset")?.unwrap_or(0),
            limit: pairs.parsed("limit")?.unwrap_or(DEFAULT_LIMIT),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use zonalclim_core::grid::Frequency;

    const KEY: &str = "source=ERA5&variable=temperature&level=L1&weighting=population&base_year=2015&frequency=daily";

    #[test]
    fn parses_key_and_filters() {
        let q = QueryParams::parse(Some(&format!("{KEY}&year_start=2001&year_end=2002&region_ids=A.1,B.1&region_ids=C"))).unwrap();
        assert_eq!(q.key.frequency, Frequency::Daily);
        assert_eq!(q.region_ids.unwrap(), ["A.1", "B.1", "C"]);
        assert_eq!((q.year_start, q.year_end), (Some(2001), Some(2002)));
        assert_eq!(q.limit, DEFAULT_LIMIT);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            format!("{KEY}&year_start=2003&year_end=2002"),
            format!("{KEY}&mode=quantile&value=1.5"),
            format!("{KEY}&mode=absolute"),
            format!("{KEY}&colour=red"),
            KEY.replace("ERA5", "CRU"),
            KEY.replace("&base_year=2015", ""),
        ] {
            let err = QueryParams::parse(Some(&bad)).unwrap_err();
            assert_eq!(err.status, axum::http::StatusCode::BAD_REQUEST, "{bad}");
        }
    }
}
