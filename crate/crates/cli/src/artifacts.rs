//! Files written by a run: the manifest, and per iteration the forecast,
//! eigenvalue table, learned metric and diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use faer::MatRef;
use fkmd_core::fkmd::IterationReport;
use fkmd_core::koopman::EigenRow;
use fkmd_core::tseries::{format_float, TimeSeries};
use fkmd_core::FkmdError;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const FORECAST: &str = "forecast.csv";
pub const ALTERNATE_FORECAST: &str = "forecast_alternate.csv";
pub const EIGENVALUES: &str = "eigenvalues.csv";
pub const METRIC: &str = "metric.csv";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const TIMINGS: &str = "timings.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FkmdError + '_ {
    move |source| FkmdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FkmdError> {
    fs::write(path, text).map_err(io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FkmdError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FkmdError::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Debug, Serialize)]
pub struct DataFingerprint {
    pub path: String,
    pub rows: usize,
    pub columns: usize,
    pub sha256: String,
}

impl DataFingerprint {
    pub fn of_file(path: &Path, series: &TimeSeries) -> Result<Self, FkmdError> {
        let bytes = fs::read(path).map_err(io(path))?;
        Ok(Self {
            path: path.display().to_string(),
            rows: series.len(),
            columns: series.n_channels(),
            sha256: hex(&Sha256::digest(&bytes)),
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub data: DataFingerprint,
    pub outputs: Vec<String>,
}

/// Relative paths of the artifacts of `iterations` iterations.
pub fn planned_outputs(iterations: usize, with_alternate: bool) -> Vec<String> {
    let mut out = Vec::new();
    for it in 1..=iterations {
        let mut names = vec![FORECAST, EIGENVALUES, METRIC, DIAGNOSTICS, TIMINGS];
        if with_alternate {
            names.insert(1, ALTERNATE_FORECAST);
        }
        out.extend(names.into_iter().map(|n| format!("{}/{n}", iteration_dir(it))));
    }
    out
}

pub fn iteration_dir(iteration: usize) -> String {
    format!("iter_{iteration}")
}

/// Forecast rows with their step and series time index, then one column
/// per observed coordinate.
pub fn forecast_csv(values: MatRef<'_, f64>, iteration: usize, start: usize, names: &[String]) -> String {
    let mut out = String::new();
    out.push_str("iteration,step,time_index");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for k in 0..values.nrows() {
        let _ = write!(out, "{iteration},{},{}", k + 1, start + k);
        for c in 0..values.ncols() {
            out.push(',');
            out.push_str(&format_float(values[(k, c)]));
        }
        out.push('\n');
    }
    out
}

pub fn eigenvalues_csv(rows: &[EigenRow]) -> String {
    let mut out = String::from("index,mu_re,mu_im,lambda_re,lambda_im,mode_norm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index,
            format_float(r.mu.0),
            format_float(r.mu.1),
            format_float(r.lambda.0),
            format_float(r.lambda.1),
            format_float(r.mode_norm)
        );
    }
    out
}

/// Dense matrix, coordinate names as header.
pub fn matrix_csv(m: MatRef<'_, f64>, names: &[String]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_float(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Embedded coordinate labels `channel[delay]`.
pub fn coordinate_names(channels: &[String], ell: usize) -> Vec<String> {
    (0..ell)
        .flat_map(|p| channels.iter().map(move |c| format!("{c}[{p}]")))
        .collect()
}

/// Write every artifact of one iteration under `root/iter_k/`.
pub fn write_iteration(
    root: &Path,
    report: &IterationReport,
    coordinate_names: &[String],
    observed_names: &[String],
) -> Result<PathBuf, FkmdError> {
    let dir = root.join(iteration_dir(report.iteration));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let start = report.diagnostics.forecast_start;
    write_text(
        &dir.join(FORECAST),
        &forecast_csv(report.forecast.as_ref(), report.iteration, start, observed_names),
    )?;
    if let Some(alt) = &report.alternate_forecast {
        write_text(
            &dir.join(ALTERNATE_FORECAST),
            &forecast_csv(alt.as_ref(), report.iteration, start, observed_names),
        )?;
    }
    write_text(&dir.join(EIGENVALUES), &eigenvalues_csv(&report.eigenvalues))?;
    let metric = report.metric_learned.as_ref().unwrap_or(&report.metric_used);
    write_text(&dir.join(METRIC), &matrix_csv(metric.matrix(), coordinate_names))?;
    write_json(&dir.join(DIAGNOSTICS), &report.diagnostics)?;
    write_json(&dir.join(TIMINGS), &report.timings)?;
    Ok(dir)
}
