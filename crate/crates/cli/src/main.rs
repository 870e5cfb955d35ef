//! `zonalclim`: build weight grids and coverage caches, aggregate climate
//! archives to regions, count exceedance days and serve a dataset store.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use zonalclim_core::catalog::{export, DatasetKey, DatasetMeta, Format, Shape, Source, Store};
use zonalclim_core::fixtures;
use zonalclim_core::geom::{build_coverage, parse_geojson, CoverageMatrix, Level};
use zonalclim_core::grid::{read_archive, Encoding, Frequency, GridSpec, Raster, RasterSeries};
use zonalclim_core::temporal::{count_exceedance_days, upscale, Period, Stat, ThresholdMode, ThresholdSpec};
use zonalclim_core::weights::{
    aurora_correct, downsample_block_mean, nightlight_weight, population_weight, resample_half_offset, unweighted,
    WeightGrid, AURORA_LAT_CUT,
};
use zonalclim_core::zonal::{aggregate_series, SeriesTable};
use zonalclim_server::ServerConfig;

#[derive(Parser, Debug)]
#[command(name = "zonalclim", version, about = "Aggregate gridded climate data to administrative regions")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// More log output (-v, -vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a weight grid archive.
    BuildWeights(BuildWeights),
    /// Compute region/cell coverage fractions and write the cache file.
    BuildCoverage(BuildCoverage),
    /// Aggregate a climate archive to regions and export the table.
    Aggregate(Aggregate),
    /// Count days above a threshold per region and month or year.
    Extremes(Extremes),
    /// Serve a dataset store over HTTP.
    Serve(Serve),
    /// Check an archive or boundary file without processing it.
    Validate(Validate),
    /// Write the synthetic demo world into a store directory.
    Demo(Demo),
}

#[derive(Args, Debug)]
struct BuildWeights {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    base_year: Option<i32>,
    /// Population density archive (persons/km²).
    #[arg(long)]
    density: Option<PathBuf>,
    /// Native-resolution night-light radiance archive.
    #[arg(long)]
    lights: Option<PathBuf>,
    /// Three reference archives for the aurora correction, on the downsampled grid.
    #[arg(long, num_args = 3, value_delimiter = ',')]
    refs: Vec<PathBuf>,
    /// Block size for night-light downsampling.
    #[arg(long, default_value_t = 60)]
    factor: usize,
    #[arg(long, default_value_t = AURORA_LAT_CUT)]
    lat_cut: f64,
    /// Target grid: inline `rows=..,cols=..,...` or a path to any archive on that grid.
    #[arg(long)]
    target_spec: Option<String>,
    #[arg(long, value_enum, default_value_t = EncodingArg::LeFloat64)]
    encoding: EncodingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildCoverage {
    /// Inline `rows=..,cols=..,...` or a path to any archive on that grid.
    #[arg(long)]
    grid_spec: String,
    #[arg(long)]
    boundaries: PathBuf,
    /// Keep only features of this level (default: the file must hold one level).
    #[arg(long)]
    level: Option<Level>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    climate: PathBuf,
    #[arg(long)]
    coverage: PathBuf,
    /// Weight archive; omit for unweighted aggregation.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Output {
    /// Output file; stdout when absent or `-`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ShapeArg::Long)]
    shape: ShapeArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct Aggregate {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = UpscaleArg::None)]
    upscale: UpscaleArg,
    /// Frequency to upscale to.
    #[arg(long, value_enum, default_value_t = TargetArg::Annual)]
    to: TargetArg,
    #[command(flatten)]
    output: Output,
    /// Also store the table in this dataset store.
    #[arg(long, requires = "source")]
    store: Option<PathBuf>,
    #[arg(long)]
    source: Option<Source>,
    #[arg(long, default_value = "unknown")]
    source_version: String,
}

#[derive(Args, Debug)]
struct Extremes {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, allow_negative_numbers = true)]
    value: f64,
    #[arg(long, value_enum, default_value_t = PeriodArg::Year)]
    period: PeriodArg,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct Serve {
    #[arg(long)]
    store: PathBuf,
    /// Bind address; overrides ZONALCLIM_ADDR.
    #[arg(long)]
    addr: Option<String>,
    /// Allowed origins; overrides ZONALCLIM_CORS_ORIGIN.
    #[arg(long)]
    cors_origin: Option<String>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["archive", "boundaries"]))]
struct Validate {
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    boundaries: Option<PathBuf>,
    #[arg(long)]
    level: Option<Level>,
}

#[derive(Args, Debug)]
struct Demo {
    #[arg(long)]
    store: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Unweighted,
    Population,
    Nightlight,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EncodingArg {
    Text,
    LeFloat64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum UpscaleArg {
    Mean,
    Sum,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TargetArg {
    Monthly,
    Annual,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ShapeArg {
    Wide,
    Long,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Absolute,
    Quantile,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PeriodArg {
    Month,
    Year,
}

/// Bad flag combinations found after parsing; exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::BuildWeights(a) => build_weights(a)?,
        Command::BuildCoverage(a) => build_coverage_cmd(a)?,
        Command::Aggregate(a) => aggregate(a)?,
        Command::Extremes(a) => extremes(a)?,
        Command::Serve(a) => serve(a)?,
        Command::Validate(a) => return validate(a),
        Command::Demo(a) => demo(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn open(path: &Path) -> anyhow::Result<io::BufReader<fs::File>> {
    Ok(io::BufReader::new(fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn load_series(path: &Path) -> anyhow::Result<RasterSeries> {
    let (_, series) = read_archive(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(series)
}

fn load_single(path: &Path) -> anyhow::Result<Raster> {
    let series = load_series(path)?;
    match series.len() {
        1 => Ok(series.into_frames().remove(0)),
        n => Err(anyhow!("{} holds {n} frames, expected 1", path.display())),
    }
}

fn grid_spec(arg: &str) -> anyhow::Result<GridSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok(*load_series(path)?.spec())
    } else {
        arg.parse().map_err(|e| usage(format!("--grid-spec `{arg}`: {e}")))
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        None => io::stdout().write_all(bytes)?,
        Some(p) if p == Path::new("-") => io::stdout().write_all(bytes)?,
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
    }
    Ok(())
}

fn build_weights(a: BuildWeights) -> anyhow::Result<()> {
    let base_year = match (a.kind, a.base_year) {
        (KindArg::Unweighted, Some(_)) => return Err(usage("--base-year does not apply to --kind unweighted")),
        (KindArg::Unweighted, None) => None,
        (_, None) => return Err(usage("--base-year is required for weighted kinds")),
        (_, Some(y)) => Some(y),
    };
    let target = a.target_spec.as_deref().map(grid_spec).transpose()?;
    let weights = match a.kind {
        KindArg::Unweighted => {
            let spec = target.ok_or_else(|| usage("--target-spec is required for --kind unweighted"))?;
            unweighted(&spec)
        }
        KindArg::Population => {
            let path = a.density.as_deref().ok_or_else(|| usage("--density is required for --kind population"))?;
            let density = load_single(path)?;
            let w = population_weight(&density, density.spec(), base_year.unwrap_or_default())
                .context("population")?;
            maybe_resample(w, target)?
        }
        KindArg::Nightlight => {
            let path = a.lights.as_deref().ok_or_else(|| usage("--lights is required for --kind nightlight"))?;
            let lights = load_single(path)?;
            let coarse = downsample_block_mean(&lights, a.factor).context("downsample")?;
            let corrected = if a.refs.is_empty() {
                coarse
            } else {
                let refs = a.refs.iter().map(|p| load_single(p)).collect::<anyhow::Result<Vec<_>>>()?;
                aurora_correct(&coarse, &refs, a.lat_cut).context("aurora")?
            };
            let w = nightlight_weight(&corrected, base_year.unwrap_or_default()).context("nightlight")?;
            maybe_resample(w, target)?
        }
    };
    let encoding = match a.encoding {
        EncodingArg::Text => Encoding::Text,
        EncodingArg::LeFloat64 => Encoding::LeFloat64,
    };
    let mut buf = Vec::new();
    weights.write_archive(&mut buf, encoding)?;
    write_output(Some(&a.out), &buf)
}

fn maybe_resample(w: WeightGrid, target: Option<GridSpec>) -> anyhow::Result<WeightGrid> {
    match target {
        Some(t) if t != *w.spec() => Ok(resample_half_offset(&w, &t).context("resample")?),
        _ => Ok(w),
    }
}

fn build_coverage_cmd(a: BuildCoverage) -> anyhow::Result<()> {
    let spec = grid_spec(&a.grid_spec)?;
    let regions = parse_geojson(open(&a.boundaries)?, a.level)
        .with_context(|| format!("reading {}", a.boundaries.display()))?;
    let cov = build_coverage(&spec, &regions);
    write_output(Some(&a.out), &cov.to_cache_bytes())
}

fn aggregated(inputs: &Inputs) -> anyhow::Result<SeriesTable> {
    let xs = load_series(&inputs.climate)?;
    let cov = CoverageMatrix::read_cache(open(&inputs.coverage)?)
        .with_context(|| format!("reading {}", inputs.coverage.display()))?;
    let w = match &inputs.weights {
        Some(p) => WeightGrid::read_archive(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => unweighted(cov.spec()),
    };
    Ok(aggregate_series(&xs, &cov, &w).context("aggregate")?)
}

fn shape_format(o: &Output) -> (Shape, Format) {
    let shape = match o.shape {
        ShapeArg::Wide => Shape::Wide,
        ShapeArg::Long => Shape::Long,
    };
    let format = match o.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    };
    (shape, format)
}

fn aggregate(a: Aggregate) -> anyhow::Result<()> {
    let mut table = aggregated(&a.inputs)?;
    let stat = match a.upscale {
        UpscaleArg::None => None,
        UpscaleArg::Mean => Some(Stat::Mean),
        UpscaleArg::Sum => Some(Stat::Sum),
    };
    if let Some(stat) = stat {
        let target = match a.to {
            TargetArg::Monthly => Frequency::Monthly,
            TargetArg::Annual => Frequency::Annual,
        };
        table = upscale(&table, target, stat).context("upscale")?;
    }
    if let Some(root) = &a.store {
        let h = table.header();
        let key = DatasetKey {
            source: a.source.expect("clap enforces --source"),
            variable: h.variable,
            level: h.level,
            weighting: h.weighting,
            base_year: h.base_year,
            frequency: h.frequency,
        };
        let store = Store::open(root)?;
        let meta = DatasetMeta::for_table(key, a.source_version.clone(), &table)?;
        let id = store.store(&table, meta).context("store")?;
        log::info!("stored {id}");
    }
    let (shape, format) = shape_format(&a.output);
    write_output(a.output.out.as_deref(), &export(&table, shape, format))
}

fn extremes(a: Extremes) -> anyhow::Result<()> {
    let mode = match a.mode {
        ModeArg::Absolute => ThresholdMode::Absolute,
        ModeArg::Quantile => ThresholdMode::Quantile,
    };
    let period = match a.period {
        PeriodArg::Month => Period::Month,
        PeriodArg::Year => Period::Year,
    };
    let spec = ThresholdSpec::new(mode, a.value, period).map_err(|e| usage(e.to_string()))?;
    let daily = aggregated(&a.inputs)?;
    let counts = count_exceedance_days(&daily, &spec).context("extremes")?;
    let (shape, format) = shape_format(&a.output);
    write_output(a.output.out.as_deref(), &export(&counts, shape, format))
}

fn serve(a: Serve) -> anyhow::Result<()> {
    let env = ServerConfig::from_env().map_err(usage)?;
    let addr = match a.addr {
        Some(s) => s.parse().map_err(|e| usage(format!("--addr `{s}`: {e}")))?,
        None => env.addr,
    };
    let cors = a.cors_origin.or(env.cors_origin);
    if !a.store.is_dir() {
        return Err(anyhow!("store {} does not exist", a.store.display()));
    }
    let store = Arc::new(Store::open(&a.store)?);
    store.list().context("reading store index")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        io::stdout().flush()?;
        zonalclim_server::serve(listener, store, cors.as_deref()).await?;
        Ok(())
    })
}

fn validate(a: Validate) -> anyhow::Result<ExitCode> {
    let (label, result) = if let Some(p) = &a.archive {
        let report = open(p).map_err(|e| e.to_string()).and_then(|r| {
            read_archive(r).map_err(|e| e.to_string()).map(|(h, s)| {
                format!(
                    "{} frames of {}×{} {} ({}, {})",
                    s.len(),
                    s.spec().n_rows(),
                    s.spec().n_cols(),
                    h.variable,
                    h.frequency,
                    h.encoding.as_str()
                )
            })
        });
        (p, report)
    } else {
        let p = a.boundaries.as_ref().expect("clap requires one input");
        let report = open(p).map_err(|e| e.to_string()).and_then(|r| {
            parse_geojson(r, a.level)
                .map_err(|e| e.to_string())
                .map(|set| format!("{} regions at level {}", set.len(), set.level()))
        });
        (p, report)
    };
    Ok(match result {
        Ok(summary) => {
            println!("ok: {}: {summary}", label.display());
            ExitCode::SUCCESS
        }
        Err(finding) => {
            println!("invalid: {}: {finding}", label.display());
            ExitCode::from(1)
        }
    })
}

fn demo(a: Demo) -> anyhow::Result<()> {
    let store = Store::open(&a.store)?;
    let metas = fixtures::synthetic_world().populate(&store)?;
    let dir = a.store.join("boundaries");
    fs::create_dir_all(&dir)?;
    for level in [Level::L0, Level::L1] {
        fs::write(dir.join(format!("{level}.geojson")), fixtures::boundaries_geojson(level))?;
    }
    println!("wrote {} datasets to {}", metas.len(), a.store.display());
    Ok(())
}
