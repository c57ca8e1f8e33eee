mod artifacts;
mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fkmd_core::fkmd::{self, FeatureKind, IterationReport, RunFailure};
use fkmd_core::koopman::ObservationMap;
use fkmd_core::lorenz96::{self, Lorenz96Params};
use fkmd_core::score;
use fkmd_core::tseries::TimeSeries;
use fkmd_core::{ErrorClass, FkmdError};
use serde::Serialize;

use crate::artifacts::{DataFingerprint, Manifest};
use crate::config::{Overrides, RunConfig};

const THREADS_ENV: &str = "FKMD_THREADS";

#[derive(Parser)]
#[command(name = "fkmd", version, about = "Featurized Koopman mode decomposition")]
struct Cli {
    /// Worker threads (default: all cores, or $FKMD_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Lorenz-96 and write the trajectory as CSV
    GenerateLorenz(GenerateArgs),
    /// Run the iterative metric-learning fit and write per-iteration artifacts
    FitPredict(RunArgs),
    /// Single iteration with an isotropic kernel, no metric learning
    OrdinaryKmd(RunArgs),
    /// Relative RMS error and correlation of a forecast against a reference
    Score(ScoreArgs),
}

#[derive(clap::Args)]
struct GenerateArgs {
    /// Number of recorded samples
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    samples: u64,
    #[arg(long, default_value_t = 40)]
    coords: usize,
    #[arg(long, default_value_t = 8.0)]
    forcing: f64,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    /// Time between recorded samples
    #[arg(long, default_value_t = 0.05)]
    lag: f64,
    /// Samples to integrate and discard first
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    /// Independent standard normal channels to append
    #[arg(long, default_value_t = 0)]
    noise: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first coordinate (before any noise channels)
    #[arg(long)]
    observe_first: bool,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Training series CSV
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long, short)]
    output: PathBuf,
    /// TOML configuration; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the artifacts of an earlier run in the output directory
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(clap::Args)]
struct ScoreArgs {
    #[arg(long)]
    forecast: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Comma-separated `forecast_column=reference_column` pairs, or names
    /// present in both files (default: every shared column)
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
    /// Time index of the first reference row, used with the forecast's
    /// `time_index` column
    #[arg(long, default_value_t = 0)]
    reference_start: usize,
    /// Write the JSON here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::GenerateLorenz(a) => generate_lorenz(a),
        Command::FitPredict(a) => fit_predict(a, false),
        Command::OrdinaryKmd(a) => fit_predict(a, true),
        Command::Score(a) => score_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e.class() {
                ErrorClass::Argument => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), FkmdError> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| FkmdError::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let Some(n) = flag.or(from_env) else {
        return Ok(());
    };
    if n == 0 {
        return Err(FkmdError::InvalidParameter("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FkmdError::InvalidParameter(format!("thread pool: {e}")))?;
    faer::set_global_parallelism(if n == 1 { faer::Par::Seq } else { faer::Par::rayon(n) });
    Ok(())
}

fn generate_lorenz(a: GenerateArgs) -> Result<(), FkmdError> {
    let params = Lorenz96Params {
        n_coords: a.coords,
        forcing: a.forcing,
        dt: a.dt,
        sample_lag: a.lag,
        n_samples: a.samples as usize,
        burn_in: a.burn_in,
    };
    params.steps_per_sample()?;
    let mut series = lorenz96::simulate(&params, None)?;
    if a.observe_first {
        series = series.select_channels(&[0])?;
    }
    if a.noise > 0 {
        series = series.augment_noise(a.noise, a.seed);
    }
    series.write_csv(&a.output)?;
    log::info!(
        "wrote {} samples x {} channels to {}",
        series.len(),
        series.n_channels(),
        a.output.display()
    );
    Ok(())
}

fn resolve_channels(series: &TimeSeries, wanted: &[String]) -> Result<Vec<usize>, FkmdError> {
    wanted
        .iter()
        .map(|w| {
            series
                .channel_index(w)
                .or_else(|| w.parse::<usize>().ok().filter(|&i| i < series.n_channels()))
                .ok_or_else(|| FkmdError::InvalidParameter(format!("no input column {w:?}")))
        })
        .collect()
}

fn fit_predict(a: RunArgs, ordinary: bool) -> Result<(), FkmdError> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    if ordinary {
        cfg.fkmd.iterations = 1;
    }
    if cfg.fkmd.feature_kind == FeatureKind::Kernel && cfg.n_features_given {
        log::warn!("feature count is ignored for kernel features, which use one feature per sample");
    }
    cfg.fkmd.validate()?;

    let mut series = TimeSeries::load_csv(&a.data, cfg.lag)?;
    if !cfg.channels.is_empty() {
        let idx = resolve_channels(&series, &cfg.channels)?;
        series = series.select_channels(&idx)?;
    }
    let fingerprint = DataFingerprint::of_file(&a.data, &series)?;

    std::fs::create_dir_all(&a.output).map_err(|e| FkmdError::Io {
        path: a.output.clone(),
        source: e,
    })?;
    let manifest_path = a.output.join(artifacts::MANIFEST);
    if manifest_path.exists() && !a.overwrite {
        return Err(FkmdError::InvalidParameter(format!(
            "{} already holds a run; pass --overwrite to replace it",
            a.output.display()
        )));
    }
    let dim = cfg.fkmd.ell * series.n_channels();
    let full_state = cfg.fkmd.observation.n_outputs(dim) == dim;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: if ordinary { "ordinary-kmd" } else { "fit-predict" },
        seed: cfg.fkmd.seed,
        config: &cfg,
        data: fingerprint,
        outputs: artifacts::planned_outputs(cfg.fkmd.iterations, full_state),
    };
    artifacts::write_json(&manifest_path, &manifest)?;

    let coords = artifacts::coordinate_names(series.channel_names(), cfg.fkmd.ell);
    if let ObservationMap::Indices(idx) = &cfg.fkmd.observation {
        if let Some(bad) = idx.iter().find(|&&i| i >= dim) {
            return Err(FkmdError::InvalidParameter(format!(
                "observation index {bad} outside embedded dimension {dim}"
            )));
        }
    }
    let observed: Vec<String> = (0..cfg.fkmd.observation.n_outputs(dim))
        .map(|l| coords[cfg.fkmd.observation.coordinate(l)].clone())
        .collect();

    let outcome = if ordinary {
        fkmd::ordinary_kmd(&cfg.fkmd, &series).map(|r| vec![r])
    } else {
        fkmd::run(&cfg.fkmd, &series)
    };
    let (reports, failure) = match outcome {
        Ok(r) => (r, None),
        Err(RunFailure {
            reports,
            iteration,
            step,
            source,
        }) => (reports, Some((iteration, step, source))),
    };
    write_reports(&a.output, &reports, &coords, &observed)?;
    match failure {
        None => {
            log::info!("wrote {} iterations to {}", reports.len(), a.output.display());
            Ok(())
        }
        Some((iteration, step, source)) => {
            log::error!(
                "iteration {iteration} failed during {step}; {} completed iterations were kept",
                reports.len()
            );
            Err(source)
        }
    }
}

fn write_reports(root: &Path, reports: &[IterationReport], coords: &[String], observed: &[String]) -> Result<(), FkmdError> {
    for r in reports {
        artifacts::write_iteration(root, r, coords, observed)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ColumnScore {
    forecast: String,
    reference: String,
    relative_rms: Option<f64>,
    correlation: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    relative_rms: Option<f64>,
    mean_correlation: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    rows: usize,
    columns: Vec<ColumnScore>,
    aggregate: Aggregate,
}

const FORECAST_INDEX_COLUMNS: [&str; 3] = ["iteration", "step", "time_index"];

fn score_cmd(a: ScoreArgs) -> Result<(), FkmdError> {
    let forecast = TimeSeries::load_csv(&a.forecast, 1.0)?;
    let reference = TimeSeries::load_csv(&a.reference, 1.0)?;

    let pairs: Vec<(String, String)> = match &a.columns {
        Some(list) => list
            .iter()
            .map(|s| match s.split_once('=') {
                Some((f, r)) => (f.to_string(), r.to_string()),
                None => (s.clone(), s.clone()),
            })
            .collect(),
        None => forecast
            .channel_names()
            .iter()
            .filter(|n| !FORECAST_INDEX_COLUMNS.contains(&n.as_str()) && reference.channel_index(n).is_some())
            .map(|n| (n.clone(), n.clone()))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(FkmdError::InvalidParameter("no columns to score; pass --columns".into()));
    }

    // reference rows aligned with the forecast rows
    let rows: Vec<usize> = match forecast.channel_index("time_index") {
        Some(c) => forecast
            .column(c)
            .iter()
            .map(|&t| {
                let t = t as usize;
                t.checked_sub(a.reference_start)
                    .filter(|&r| r < reference.len())
                    .ok_or_else(|| {
                        FkmdError::DimensionMismatch(format!("reference has no row for time index {t}"))
                    })
            })
            .collect::<Result<_, _>>()?,
        None if forecast.len() == reference.len() => (0..forecast.len()).collect(),
        None => {
            return Err(FkmdError::DimensionMismatch(format!(
                "forecast has {} rows, reference {}",
                forecast.len(),
                reference.len()
            )))
        }
    };

    let mut columns = Vec::new();
    let mut all_pred = Vec::new();
    let mut all_ref = Vec::new();
    for (f, r) in pairs {
        let fc = forecast
            .channel_index(&f)
            .ok_or_else(|| FkmdError::InvalidParameter(format!("forecast has no column {f:?}")))?;
        let rc = reference
            .channel_index(&r)
            .ok_or_else(|| FkmdError::InvalidParameter(format!("reference has no column {r:?}")))?;
        let pred = forecast.column(fc);
        let truth: Vec<f64> = rows.iter().map(|&t| reference.value(t, rc)).collect();
        let relative_rms = score::relative_rms(&pred, &truth);
        let correlation = score::pearson(&pred, &truth);
        let note = match (relative_rms, correlation) {
            (None, _) => Some("reference is identically zero; relative error undefined".to_string()),
            (_, None) => Some("zero variance; correlation undefined".to_string()),
            _ => None,
        };
        all_pred.extend_from_slice(&pred);
        all_ref.extend_from_slice(&truth);
        columns.push(ColumnScore {
            forecast: f,
            reference: r,
            relative_rms,
            correlation,
            note,
        });
    }
    let corrs: Vec<f64> = columns.iter().filter_map(|c| c.correlation).collect();
    let report = ScoreReport {
        rows: rows.len(),
        aggregate: Aggregate {
            relative_rms: score::relative_rms(&all_pred, &all_ref),
            mean_correlation: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
        },
        columns,
    };
    match &a.output {
        Some(path) => artifacts::write_json(path, &report),
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(|e| FkmdError::Format(e.to_string()))?;
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(FkmdError::Io {
                    path: "<stdout>".into(),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}
