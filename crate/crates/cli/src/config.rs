//! Run configuration: a flat TOML file with the driver's field names plus
//! `lag` and `channels`, overridden by command-line flags.

use std::path::Path;

use clap::{Args, ValueEnum};
use fkmd_core::fkmd::{FeatureKind, FkmdConfig, PredictionScheme};
use fkmd_core::koopman::{ModeFilter, ObservationMap, Ridge};
use fkmd_core::mahalanobis::JSource;
use fkmd_core::FkmdError;
use serde::Serialize;

/// Everything needed to reproduce a run besides the data file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Sampling interval of the input series.
    pub lag: f64,
    /// Input columns to use, by header name or 0-based index; all if empty.
    pub channels: Vec<String>,
    pub fkmd: FkmdConfig,
    /// Whether a feature count was set explicitly, in the file or by flag.
    #[serde(skip)]
    pub n_features_given: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lag: 1.0,
            channels: Vec::new(),
            fkmd: FkmdConfig::default(),
            n_features_given: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, FkmdError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| FkmdError::InvalidParameter(format!("config: {e}")))?;
        let mut out = RunConfig::default();
        if let Some(v) = table.remove("lag") {
            out.lag = v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| FkmdError::InvalidParameter("config: lag must be a number".into()))?;
        }
        if let Some(v) = table.remove("channels") {
            let list = v
                .as_array()
                .ok_or_else(|| FkmdError::InvalidParameter("config: channels must be a list".into()))?;
            out.channels = list
                .iter()
                .map(|c| match c {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    _ => Err(FkmdError::InvalidParameter("config: channels must be names or indices".into())),
                })
                .collect::<Result<_, _>>()?;
        }
        out.n_features_given = table.contains_key("R") || table.contains_key("n_features");
        out.fkmd = toml::Value::Table(table)
            .try_into()
            .map_err(|e| FkmdError::InvalidParameter(format!("config: {e}")))?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, FkmdError> {
        let text = std::fs::read_to_string(path).map_err(|e| FkmdError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureKindArg {
    Kernel,
    Rff,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Spectral,
    Rollout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum JSourceArg {
    Modal,
    FiniteDifference,
    FullState,
}

/// Flags that override configuration values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Sampling interval of the input series
    #[arg(long)]
    pub lag: Option<f64>,
    /// Comma-separated input columns (header names or 0-based indices)
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<String>>,
    /// Embedding length
    #[arg(long)]
    pub ell: Option<usize>,
    #[arg(long, value_enum)]
    pub feature_kind: Option<FeatureKindArg>,
    /// Number of random Fourier features
    #[arg(long, alias = "R")]
    pub n_features: Option<usize>,
    /// Bandwidth factor
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Regression ridge: "auto" or a nonnegative number
    #[arg(long, value_parser = parse_ridge)]
    pub ridge: Option<Ridge>,
    /// Ridge added to each learned metric
    #[arg(long)]
    pub metric_delta: Option<f64>,
    /// Rows used for the bandwidth and metric estimates
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// "identity" or comma-separated 0-based embedded coordinates
    #[arg(long, value_parser = parse_observation)]
    pub observe: Option<ObservationMap>,
    /// Forecast length in lags
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    pub j_source: Option<JSourceArg>,
    /// Keep one frequency draw for every iteration
    #[arg(long)]
    pub fixed_frequencies: bool,
    /// Subtract channel means before fitting
    #[arg(long)]
    pub center: bool,
    #[arg(long)]
    pub constancy_trials: Option<usize>,
    #[arg(long)]
    pub metric_top_k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub metric_re_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub metric_re_max: Option<f64>,
    #[arg(long)]
    pub metric_im_max: Option<f64>,
    #[arg(long)]
    pub predict_top_k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub predict_re_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub predict_re_max: Option<f64>,
    #[arg(long)]
    pub predict_im_max: Option<f64>,
}

fn parse_ridge(s: &str) -> Result<Ridge, String> {
    if s == "auto" {
        return Ok(Ridge::Auto);
    }
    let v: f64 = s.parse().map_err(|_| format!("expected \"auto\" or a number, got {s:?}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(Ridge::Fixed(v))
    } else {
        Err(format!("ridge must be nonnegative, got {v}"))
    }
}

fn parse_observation(s: &str) -> Result<ObservationMap, String> {
    if s == "identity" {
        return Ok(ObservationMap::Identity);
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad coordinate index {t:?}")))
        .collect::<Result<Vec<_>, _>>()
        .map(ObservationMap::Indices)
}

fn set_filter(f: &mut ModeFilter, top_k: Option<usize>, re_min: Option<f64>, re_max: Option<f64>, im_max: Option<f64>) {
    if let Some(k) = top_k {
        f.top_k = Some(k);
    }
    if let Some(v) = re_min {
        f.re_min = v;
    }
    if let Some(v) = re_max {
        f.re_max = v;
    }
    if let Some(v) = im_max {
        f.im_max = v;
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.lag {
            cfg.lag = v;
        }
        if let Some(v) = &self.channels {
            cfg.channels = v.clone();
        }
        let f = &mut cfg.fkmd;
        if let Some(v) = self.ell {
            f.ell = v;
        }
        if let Some(v) = self.feature_kind {
            f.feature_kind = match v {
                FeatureKindArg::Kernel => FeatureKind::Kernel,
                FeatureKindArg::Rff => FeatureKind::Rff,
            };
        }
        if let Some(v) = self.n_features {
            f.n_features = v;
            cfg.n_features_given = true;
        }
        if let Some(v) = self.h {
            f.h = v;
        }
        if let Some(v) = self.iterations {
            f.iterations = v;
        }
        if let Some(v) = self.ridge {
            f.ridge = v;
        }
        if let Some(v) = self.metric_delta {
            f.metric_delta = v;
        }
        if let Some(v) = self.subsample {
            f.subsample = v;
        }
        if let Some(v) = self.seed {
            f.seed = v;
        }
        if let Some(v) = &self.observe {
            f.observation = v.clone();
        }
        if let Some(v) = self.steps {
            f.prediction_steps = v;
        }
        if let Some(v) = self.scheme {
            f.prediction_scheme = match v {
                SchemeArg::Spectral => PredictionScheme::Spectral,
                SchemeArg::Rollout => PredictionScheme::Rollout,
            };
        }
        if let Some(v) = self.j_source {
            f.j_source = match v {
                JSourceArg::Modal => JSource::Modal,
                JSourceArg::FiniteDifference => JSource::FiniteDifference,
                JSourceArg::FullState => JSource::FullState,
            };
        }
        if self.fixed_frequencies {
            f.fixed_frequencies = true;
        }
        if self.center {
            f.center = true;
        }
        if let Some(v) = self.constancy_trials {
            f.constancy_trials = v;
        }
        set_filter(
            &mut f.mode_filter_metric,
            self.metric_top_k,
            self.metric_re_min,
            self.metric_re_max,
            self.metric_im_max,
        );
        set_filter(
            &mut f.mode_filter_predict,
            self.predict_top_k,
            self.predict_re_min,
            self.predict_re_max,
            self.predict_im_max,
        );
    }
}
