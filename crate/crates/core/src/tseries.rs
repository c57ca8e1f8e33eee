//! Uniformly sampled multichannel time series and CSV ingestion.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FkmdError, Result};
use crate::rng;

/// `T` time points by `d` channels, stored row-major so that consecutive time
/// points are contiguous. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    n_channels: usize,
    lag: f64,
    channel_names: Vec<String>,
}

impl TimeSeries {
    /// Build from a row-major buffer. Default channel names are `x1..xd`.
    pub fn new(values: Vec<f64>, n_channels: usize, lag: f64, channel_names: Option<Vec<String>>) -> Result<Self> {
        if n_channels == 0 {
            return Err(FkmdError::InvalidParameter("time series needs at least one channel".into()));
        }
        if !(lag > 0.0 && lag.is_finite()) {
            return Err(FkmdError::InvalidParameter(format!("lag must be positive, got {lag}")));
        }
        if values.len() % n_channels != 0 {
            return Err(FkmdError::Format(format!(
                "{} values do not fill rows of {n_channels} channels",
                values.len()
            )));
        }
        let n_times = values.len() / n_channels;
        if n_times < 2 {
            return Err(FkmdError::InsufficientData {
                what: "time points",
                required: 2,
                actual: n_times,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FkmdError::Parse {
                row: pos / n_channels + 1,
                column: pos % n_channels + 1,
                message: "non-finite value".into(),
            });
        }
        let channel_names = match channel_names {
            Some(names) if names.len() != n_channels => {
                return Err(FkmdError::DimensionMismatch(format!(
                    "{} channel names for {n_channels} channels",
                    names.len()
                )))
            }
            Some(names) => names,
            None => (1..=n_channels).map(|c| format!("x{c}")).collect(),
        };
        Ok(Self {
            values,
            n_channels,
            lag,
            channel_names,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], lag: f64) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != d {
                return Err(FkmdError::Format(format!(
                    "row {} has {} columns, expected {d}",
                    i + 1,
                    r.as_ref().len()
                )));
            }
            values.extend_from_slice(r.as_ref());
        }
        Self::new(values, d, lag, None)
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.values.len() / self.n_channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn lag(&self) -> f64 {
        self.lag
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.n_channels + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        self.values.iter().skip(channel).step_by(self.n_channels).copied().collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    /// Rows `start..end` as a new series with the same lag and names.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(FkmdError::InvalidParameter(format!(
                "row range {start}..{end} outside series of length {}",
                self.len()
            )));
        }
        Self::new(
            self.values[start * self.n_channels..end * self.n_channels].to_vec(),
            self.n_channels,
            self.lag,
            Some(self.channel_names.clone()),
        )
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.n_channels) {
            return Err(FkmdError::InvalidParameter(format!(
                "channel {bad} out of range for {} channels",
                self.n_channels
            )));
        }
        let mut values = Vec::with_capacity(self.len() * channels.len());
        for t in 0..self.len() {
            let row = self.row(t);
            values.extend(channels.iter().map(|&c| row[c]));
        }
        let names = channels.iter().map(|&c| self.channel_names[c].clone()).collect();
        Self::new(values, channels.len(), self.lag, Some(names))
    }

    /// Per-channel means over all time points.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_channels];
        for t in 0..self.len() {
            for (s, v) in sums.iter_mut().zip(self.row(t)) {
                *s += v;
            }
        }
        let n = self.len() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Subtract `offsets[c]` from every entry of channel `c`.
    pub fn shifted(&self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.n_channels {
            return Err(FkmdError::DimensionMismatch(format!(
                "{} offsets for {} channels",
                offsets.len(),
                self.n_channels
            )));
        }
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.n_channels) {
            for (v, o) in row.iter_mut().zip(offsets) {
                *v -= o;
            }
        }
        Self::new(values, self.n_channels, self.lag, Some(self.channel_names.clone()))
    }

    /// Append `n_noise` channels of independent standard Gaussian draws.
    ///
    /// Draws are made time-major (all noise channels at t = 0, then t = 1,
    /// ...) from a generator keyed on `seed`; original channels are copied
    /// untouched.
    pub fn augment_noise(&self, n_noise: usize, seed: u64) -> Self {
        if n_noise == 0 {
            return self.clone();
        }
        let mut rng = rng::stream(seed, rng::NOISE_STREAM);
        let d = self.n_channels + n_noise;
        let mut values = Vec::with_capacity(self.len() * d);
        for t in 0..self.len() {
            values.extend_from_slice(self.row(t));
            values.extend((0..n_noise).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        let mut names = self.channel_names.clone();
        names.extend((1..=n_noise).map(|k| format!("noise{k}")));
        Self {
            values,
            n_channels: d,
            lag: self.lag,
            channel_names: names,
        }
    }

    pub fn load_csv(path: impl AsRef<Path>, lag: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FkmdError::io(path, e))?;
        Self::parse_csv(&text, lag)
    }

    /// Parse comma-separated text. The first line is a header when none of
    /// its cells parse as numbers. Reported row numbers are file line
    /// numbers (1-based).
    pub fn parse_csv(text: &str, lag: f64) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty())
            .peekable();

        let mut names = None;
        if let Some(&(_, first)) = lines.peek() {
            if first.split(',').all(|c| c.trim().parse::<f64>().is_err()) {
                names = Some(first.split(',').map(|c| c.trim().to_string()).collect::<Vec<_>>());
                lines.next();
            }
        }

        let mut width = names.as_ref().map(Vec::len);
        let mut values = Vec::new();
        for (line_no, line) in lines {
            let mut count = 0;
            for (col, cell) in line.split(',').enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| FkmdError::Parse {
                    row: line_no,
                    column: col + 1,
                    message: format!("'{}' is not a number", cell.trim()),
                })?;
                if !v.is_finite() {
                    return Err(FkmdError::Parse {
                        row: line_no,
                        column: col + 1,
                        message: "non-finite value".into(),
                    });
                }
                values.push(v);
                count += 1;
            }
            match width {
                None => width = Some(count),
                Some(w) if w != count => {
                    return Err(FkmdError::Format(format!(
                        "line {line_no} has {count} columns, expected {w}"
                    )))
                }
                _ => {}
            }
        }
        let Some(width) = width else {
            return Err(FkmdError::InsufficientData {
                what: "time points",
                required: 2,
                actual: 0,
            });
        };
        Self::new(values, width, lag, names)
    }

    /// CSV text with a header line. Values use Rust's shortest round-trip
    /// formatting, so parsing the output recovers every value bit for bit.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 20);
        out.push_str(&self.channel_names.join(","));
        out.push('\n');
        for t in 0..self.len() {
            for (c, v) in self.row(t).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| FkmdError::io(path, e))
    }
}

/// Shortest decimal text that parses back to exactly `v`. Plain notation
/// for moderate magnitudes, scientific otherwise.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
