//! Read-only HTTP API over a dataset store.
//!
//! | route | response |
//! |---|---|
//! | `GET /catalog` | every stored [`DatasetMeta`] |
//! | `GET /series` | long-shape JSON records, paged by `offset`/`limit` |
//! | `GET /map?time=T` | `{region_id: value}` at one timestamp |
//! | `GET /extremes` | exceedance-day counts as long-shape JSON |
//! | `GET /download` | the filtered table as a csv/json attachment |
//! | `GET /preview?n=k` | the first `k` records of that download |
//! | `GET /boundaries/{level}` | `<store>/boundaries/<level>.geojson` |
//!
//! Data endpoints take the dataset key fields (`source`, `variable`, `level`,
//! `weighting`, `base_year`, `frequency`) plus optional `year_start`,
//! `year_end`, `region_ids` (comma separated or repeated) and a threshold
//! given as `mode`, `value` and `period`. Errors are `{"code", "message"}`.

mod error;
mod query;

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Map, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use zonalclim_core::catalog::{export, long_records, value_json, wide_records, DatasetMeta, Format, Shape, Store};
use zonalclim_core::geom::Level;
use zonalclim_core::grid::Frequency;
use zonalclim_core::temporal::count_exceedance_days;
use zonalclim_core::zonal::SeriesTable;

pub use error::{ApiError, ErrorBody};
pub use query::{QueryParams, DEFAULT_LIMIT};

pub const ADDR_ENV: &str = "ZONALCLIM_ADDR";
pub const CORS_ENV: &str = "ZONALCLIM_CORS_ORIGIN";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_PREVIEW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    /// Comma-separated allowed origins; `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl ServerConfig {
    pub fn from_env() -> Result<Self, String> {
        let addr = std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string());
        let addr = addr.parse().map_err(|e| format!("{ADDR_ENV}=`{addr}`: {e}"))?;
        let cors_origin = std::env::var(CORS_ENV).ok().filter(|s| !s.trim().is_empty());
        Ok(Self { addr, cors_origin })
    }
}

type Shared = Arc<Store>;

pub fn router(store: Arc<Store>, cors_origin: Option<&str>) -> Router {
    Router::new()
        .route("/catalog", get(catalog))
        .route("/series", get(series))
        .route("/map", get(map))
        .route("/extremes", get(extremes))
        .route("/download", get(download))
        .route("/preview", get(preview))
        .route("/boundaries/{level}", get(boundaries))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "only GET is supported")
        })
        .layer(cors(cors_origin))
        .with_state(store)
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::OPTIONS])
        .allow_headers(Any)
        .expose_headers([header::CONTENT_DISPOSITION, header::HeaderName::from_static("x-total-count")]);
    match origin {
        None => layer.allow_origin(Any),
        Some(list) => {
            let origins: Vec<HeaderValue> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .filter_map(|s| match HeaderValue::from_str(s) {
                    Ok(v) => Some(v),
                    Err(_) => {
                        log::warn!("ignoring invalid CORS origin `{s}`");
                        None
                    }
                })
                .collect();
            layer.allow_origin(AllowOrigin::list(origins))
        }
    }
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, store: Arc<Store>, cors_origin: Option<&str>) -> io::Result<()> {
    let app = router(store, cors_origin);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn parse(raw: Option<String>) -> Result<QueryParams, ApiError> {
    let q = QueryParams::parse(raw.as_deref())?;
    if q.threshold.is_some() && q.key.frequency != Frequency::Daily {
        return Err(ApiError::bad_request("thresholds apply to daily datasets only"));
    }
    Ok(q)
}

/// The stored table, turned into exceedance counts when a threshold is given,
/// then filtered by years and regions.
fn view(store: &Store, q: &QueryParams) -> Result<(SeriesTable, DatasetMeta), ApiError> {
    let (table, meta) = store.lookup(&q.key)?;
    let table = match &q.threshold {
        Some(spec) => count_exceedance_days(&table, spec)?,
        None => table,
    };
    Ok((table.filter(q.year_start, q.year_end, q.region_ids.as_deref()), meta))
}

fn json_bytes(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn catalog(State(store): State<Shared>) -> Result<Json<Vec<DatasetMeta>>, ApiError> {
    Ok(Json(blocking(move || Ok(store.list()?)).await?))
}

async fn series(State(store): State<Shared>, RawQuery(raw): RawQuery) -> Result<Response, ApiError> {
    let q = parse(raw)?;
    blocking(move || {
        let (table, _) = view(&store, &q)?;
        let total = table.n_records();
        let page: Vec<Value> = long_records(&table).skip(q.offset).take(q.limit).collect();
        let body = serde_json::to_vec(&page).map_err(|e| ApiError::from(zonalclim_core::Error::from(e)))?;
        let mut res = json_bytes(body);
        res.headers_mut().insert("x-total-count", HeaderValue::from(total));
        Ok(res)
    })
    .await
}

async fn map(State(store): State<Shared>, RawQuery(raw): RawQuery) -> Result<Json<Map<String, Value>>, ApiError> {
    let q = parse(raw)?;
    let time = q.time.ok_or_else(|| ApiError::bad_request("missing parameter `time`"))?;
    blocking(move || {
        let (table, _) = view(&store, &q)?;
        let t = table
            .time_index(&time)
            .ok_or_else(|| ApiError::not_found(format!("no data at {time}")))?;
        let measure = table.header().measure;
        Ok(Json(
            table
                .regions()
                .iter()
                .zip(table.rows())
                .map(|(id, row)| (id.clone(), value_json(measure, row[t])))
                .collect(),
        ))
    })
    .await
}

async fn extremes(State(store): State<Shared>, RawQuery(raw): RawQuery) -> Result<Response, ApiError> {
    let q = parse(raw)?;
    if q.key.frequency != Frequency::Daily {
        return Err(ApiError::bad_request("exceedance counts need a daily dataset"));
    }
    if q.threshold.is_none() {
        return Err(ApiError::bad_request("missing threshold: give `mode`, `value` and `period`"));
    }
    blocking(move || {
        let (table, _) = view(&store, &q)?;
        Ok(json_bytes(export(&table, Shape::Long, Format::Json)))
    })
    .await
}

fn file_name(q: &QueryParams) -> String {
    let suffix = q.threshold.map_or_else(String::new, |t| format!("_{}{}_{}", t.mode, t.value, t.period));
    format!("{}{}_{}.{}", q.key.slug(), suffix, match q.shape {
        Shape::Wide => "wide",
        Shape::Long => "long",
    }, q.format.extension())
}

async fn download(State(store): State<Shared>, RawQuery(raw): RawQuery) -> Result<Response, ApiError> {
    let q = parse(raw)?;
    blocking(move || {
        let (table, _) = view(&store, &q)?;
        let body = export(&table, q.shape, q.format);
        let disposition = format!("attachment; filename=\"{}\"", file_name(&q));
        Ok((
            [
                (header::CONTENT_TYPE, q.format.mime().to_string()),
                (header::CONTENT_DISPOSITION, disposition),
            ],
            body,
        )
            .into_response())
    })
    .await
}

/// Byte prefix of a CSV export holding the header and the first `n` records.
fn csv_prefix(bytes: &[u8], n: usize) -> &[u8] {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let mut rec = csv::ByteRecord::new();
    let _ = rdr.byte_headers();
    let mut end = rdr.position().byte() as usize;
    for _ in 0..n {
        match rdr.read_byte_record(&mut rec) {
            Ok(true) => end = rdr.position().byte() as usize,
            _ => break,
        }
    }
    &bytes[..end.min(bytes.len())]
}

async fn preview(State(store): State<Shared>, RawQuery(raw): RawQuery) -> Result<Json<Value>, ApiError> {
    let q = parse(raw)?;
    let n = q.n.unwrap_or(DEFAULT_PREVIEW);
    blocking(move || {
        let (table, meta) = view(&store, &q)?;
        let all: Vec<Value> = match q.shape {
            Shape::Long => long_records(&table).collect(),
            Shape::Wide => wide_records(&table).collect(),
        };
        let total = all.len();
        let records: Vec<Value> = all.into_iter().take(n).collect();
        let mut body = json!({
            "meta": meta,
            "header": table.header(),
            "shape": q.shape,
            "format": q.format,
            "total": total,
            "records": records,
        });
        if q.format == Format::Csv {
            let bytes = export(&table, q.shape, Format::Csv);
            let text = String::from_utf8_lossy(csv_prefix(&bytes, n)).into_owned();
            body["text"] = Value::from(text);
        }
        Ok(Json(body))
    })
    .await
}

async fn boundaries(State(store): State<Shared>, Path(level): Path<String>) -> Result<Response, ApiError> {
    let level: Level = level
        .trim_end_matches(".geojson")
        .parse()
        .map_err(|e: zonalclim_core::Error| ApiError::not_found(e.to_string()))?;
    blocking(move || {
        let path = store.root().join("boundaries").join(format!("{level}.geojson"));
        match std::fs::read(&path) {
            Ok(bytes) => Ok(([(header::CONTENT_TYPE, "application/geo+json")], bytes).into_response()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(ApiError::not_found(format!("no {level} boundaries in this store")))
            }
            Err(e) => Err(ApiError::from(zonalclim_core::Error::from(e))),
        }
    })
    .await
}
