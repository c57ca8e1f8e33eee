//! The iterative driver: estimate the bandwidth, build features, fit the
//! Koopman model, forecast, and learn the next Mahalanobis matrix.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use faer::{c64, Mat};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedDataset;
use crate::error::{FkmdError, Result};
use crate::featurize::{FeatureMap, FourierFeatures, KernelFeatures, MahalanobisMatrix, TILE_ROWS};
use crate::koopman::{self, EigenRow, KoopmanModel, ModeFilter, NormalEquations, ObservationMap, Ridge};
use crate::mahalanobis::{self, BandwidthState, JSource, MetricBlocks};
use crate::rng;
use crate::samples::{IndexedRows, RowMatrix};
use crate::tseries::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// One Mahalanobis kernel per training input, `R = N`.
    #[default]
    Kernel,
    /// Random Fourier features.
    Rff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionScheme {
    /// Eigenvalue powers from a fixed seed.
    #[default]
    Spectral,
    /// Repeated one-lag steps, re-featurizing the predicted state.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkmdConfig {
    /// Embedding length ℓ.
    pub ell: usize,
    pub feature_kind: FeatureKind,
    /// Number of random Fourier features; ignored for kernel features.
    #[serde(alias = "R")]
    pub n_features: usize,
    /// Bandwidth factor.
    pub h: f64,
    pub iterations: usize,
    pub ridge: Ridge,
    /// Ridge added to each learned metric.
    pub metric_delta: f64,
    /// Rows used to estimate the bandwidth and the metric.
    pub subsample: usize,
    /// Modes entering the curvature estimate.
    pub mode_filter_metric: ModeFilter,
    /// Modes entering the forecast.
    pub mode_filter_predict: ModeFilter,
    pub seed: u64,
    pub observation: ObservationMap,
    pub prediction_steps: usize,
    pub prediction_scheme: PredictionScheme,
    pub j_source: JSource,
    /// Reuse one frequency draw across iterations instead of redrawing.
    pub fixed_frequencies: bool,
    /// Subtract per-channel training means before fitting; forecasts are
    /// shifted back.
    pub center: bool,
    /// Random directions for the curvature-constancy diagnostic; 0 skips it.
    pub constancy_trials: usize,
}

impl Default for FkmdConfig {
    fn default() -> Self {
        Self {
            ell: 1,
            feature_kind: FeatureKind::Kernel,
            n_features: 1000,
            h: 1.0,
            iterations: 5,
            ridge: Ridge::Auto,
            metric_delta: 0.0,
            subsample: 5000,
            mode_filter_metric: ModeFilter::top(20),
            mode_filter_predict: ModeFilter::all(),
            seed: 0,
            observation: ObservationMap::Identity,
            prediction_steps: 100,
            prediction_scheme: PredictionScheme::Spectral,
            j_source: JSource::Modal,
            fixed_frequencies: false,
            center: false,
            constancy_trials: 100,
        }
    }
}

impl FkmdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FkmdError::InvalidParameter(msg));
        if self.ell == 0 {
            return bad("ell must be at least 1".into());
        }
        if self.feature_kind == FeatureKind::Rff && self.n_features == 0 {
            return bad("n_features must be at least 1".into());
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if let Ridge::Fixed(b) = self.ridge {
            if !(b >= 0.0 && b.is_finite()) {
                return bad(format!("ridge must be nonnegative, got {b}"));
            }
        }
        if !(self.metric_delta >= 0.0 && self.metric_delta.is_finite()) {
            return bad(format!("metric_delta must be nonnegative, got {}", self.metric_delta));
        }
        if self.subsample < 2 {
            return bad(format!("subsample must be at least 2, got {}", self.subsample));
        }
        if self.prediction_steps == 0 {
            return bad("prediction_steps must be at least 1".into());
        }
        if self.j_source == JSource::FullState && self.observation != ObservationMap::Identity {
            return bad("the full-state curvature needs the identity observation".into());
        }
        Ok(())
    }
}

/// Per-iteration numbers worth persisting. Wall-clock timings live in
/// [`Timings`] so that this part is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub sigma: f64,
    pub h: f64,
    pub subsample: usize,
    pub n_features: usize,
    pub ridge: f64,
    pub regression_residual: f64,
    pub retained_predict_modes: usize,
    pub retained_metric_modes: Option<usize>,
    pub max_imag_residue: f64,
    pub degenerate_spectrum: bool,
    /// Deviation of the constancy diagnostic on the freshly assembled metric.
    pub constancy_deviation: Option<f64>,
    pub metric_blocks: Option<MetricBlocks>,
    /// Series time index of the newest value in the first forecast row.
    pub forecast_start: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub bandwidth_s: f64,
    pub regression_s: f64,
    pub prediction_s: f64,
    pub metric_update_s: f64,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: usize,
    pub bandwidth: BandwidthState,
    pub eigenvalues: Vec<EigenRow>,
    /// `steps × L`, in the units of the input series.
    pub forecast: Mat<f64>,
    /// The other prediction scheme, when the observation allows it.
    pub alternate_forecast: Option<Mat<f64>>,
    /// Metric the features of this iteration were built with.
    pub metric_used: MahalanobisMatrix,
    /// Unscaled metric learned at the end of this iteration.
    pub metric_learned: Option<MahalanobisMatrix>,
    pub diagnostics: Diagnostics,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Setup,
    Bandwidth,
    Regression,
    Prediction,
    MetricUpdate,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Setup => "setup",
            Step::Bandwidth => "bandwidth estimation",
            Step::Regression => "feature regression",
            Step::Prediction => "prediction",
            Step::MetricUpdate => "metric update",
        })
    }
}

/// A failed run, with the reports of the iterations that completed.
#[derive(Debug, thiserror::Error)]
#[error("iteration {iteration} failed during {step}: {source}")]
pub struct RunFailure {
    pub reports: Vec<IterationReport>,
    pub iteration: usize,
    pub step: Step,
    #[source]
    pub source: FkmdError,
}

pub fn run(config: &FkmdConfig, series: &TimeSeries) -> std::result::Result<Vec<IterationReport>, RunFailure> {
    let mut driver = Driver::new(config, series).map_err(|e| setup_failure(e))?;
    let mut reports = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        match driver.iteration(it, true) {
            Ok(report) => reports.push(report),
            Err((step, source)) => {
                return Err(RunFailure {
                    reports,
                    iteration: it,
                    step,
                    source,
                })
            }
        }
    }
    Ok(reports)
}

/// A single iteration from the identity metric without learning a new one.
pub fn ordinary_kmd(config: &FkmdConfig, series: &TimeSeries) -> std::result::Result<IterationReport, RunFailure> {
    let mut driver = Driver::new(config, series).map_err(|e| setup_failure(e))?;
    driver.iteration(1, false).map_err(|(step, source)| RunFailure {
        reports: Vec::new(),
        iteration: 1,
        step,
        source,
    })
}

fn setup_failure(source: FkmdError) -> RunFailure {
    RunFailure {
        reports: Vec::new(),
        iteration: 0,
        step: Step::Setup,
        source,
    }
}

struct Driver<'a> {
    config: &'a FkmdConfig,
    data: EmbeddedDataset,
    offsets: Vec<f64>,
    subsample: Vec<usize>,
    metric: MahalanobisMatrix,
    fixed_omegas: Option<Mat<f64>>,
    series_len: usize,
}

type StepResult<T> = std::result::Result<T, (Step, FkmdError)>;

fn at(step: Step) -> impl FnOnce(FkmdError) -> (Step, FkmdError) {
    move |e| (step, e)
}

impl<'a> Driver<'a> {
    fn new(config: &'a FkmdConfig, series: &TimeSeries) -> Result<Self> {
        config.validate()?;
        let (work, offsets) = if config.center {
            let means = series.channel_means();
            (series.shifted(&means)?, means)
        } else {
            (series.clone(), vec![0.0; series.n_channels()])
        };
        let data = EmbeddedDataset::new(Arc::new(work), config.ell)?;
        if data.len() < 2 {
            return Err(FkmdError::InsufficientData {
                what: "embedded samples",
                required: 2,
                actual: data.len(),
            });
        }
        config.observation.validate(data.dim())?;
        let subsample = mahalanobis::subsample_indices(data.len(), config.subsample, config.seed);
        // frequencies are standard normal whatever the metric, so one draw
        // under the identity serves every iteration
        let fixed_omegas = if config.feature_kind == FeatureKind::Rff && config.fixed_frequencies {
            let f = FourierFeatures::draw(
                MahalanobisMatrix::identity(data.dim()),
                config.n_features,
                config.seed,
                rng::FREQUENCY_STREAM_BASE + 1,
            )?;
            Some(f.omegas().to_owned())
        } else {
            None
        };
        Ok(Self {
            config,
            metric: MahalanobisMatrix::identity(data.dim()),
            data,
            offsets,
            subsample,
            fixed_omegas,
            series_len: series.len(),
        })
    }

    fn features(&self, iteration: usize, metric: MahalanobisMatrix) -> Result<FeatureMap> {
        Ok(match (self.config.feature_kind, &self.fixed_omegas) {
            (FeatureKind::Kernel, _) => {
                FeatureMap::Kernel(KernelFeatures::new(RowMatrix::collect(&self.data.inputs()), metric)?)
            }
            (FeatureKind::Rff, Some(omegas)) => {
                FeatureMap::Fourier(FourierFeatures::with_omegas(omegas.clone(), metric, self.config.seed)?)
            }
            (FeatureKind::Rff, None) => FeatureMap::Fourier(FourierFeatures::draw(
                metric,
                self.config.n_features,
                self.config.seed,
                rng::FREQUENCY_STREAM_BASE + iteration as u64,
            )?),
        })
    }

    /// Accumulate the normal equations tile by tile over the embedded states.
    fn regress(&self, features: &FeatureMap) -> Result<(KoopmanModel, f64)> {
        let n = self.data.len();
        let obs = &self.config.observation;
        let l = obs.n_outputs(self.data.dim());
        let states = self.data.states();
        let mut ne = NormalEquations::new(features.n_features(), l);
        let mut start = 0;
        while start < n {
            let len = TILE_ROWS.min(n - start);
            // one extra row: outputs are the inputs shifted by one
            let block = features.feature_block(&states, start, len + 1);
            let g = Mat::from_fn(len, l, |i, c| c64::new(self.data.x(start + i)[obs.coordinate(c)], 0.0));
            ne.accumulate(block.subrows(0, len), block.subrows(1, len), g.as_ref())?;
            start += len;
        }
        ne.solve(self.config.ridge, self.data.lag())
    }

    fn uncenter(&self, mut values: Mat<f64>) -> Mat<f64> {
        let d = self.data.d_raw();
        for c in 0..values.ncols() {
            let offset = self.offsets[self.config.observation.coordinate(c) % d];
            if offset != 0.0 {
                for k in 0..values.nrows() {
                    values[(k, c)] += offset;
                }
            }
        }
        values
    }

    fn iteration(&mut self, iteration: usize, update: bool) -> StepResult<IterationReport> {
        let cfg = self.config;
        let mut timings = Timings::default();

        let clock = Instant::now();
        let inputs = self.data.inputs();
        let sample = IndexedRows::new(&inputs, &self.subsample);
        let sigma = mahalanobis::pairwise_distance_std(&sample, &self.metric).map_err(at(Step::Bandwidth))?;
        let metric_used = mahalanobis::rescale_metric(&self.metric, cfg.h, sigma).map_err(at(Step::Bandwidth))?;
        timings.bandwidth_s = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let features = self
            .features(iteration, metric_used.clone())
            .map_err(at(Step::Regression))?;
        let (model, residual) = self.regress(&features).map_err(at(Step::Regression))?;
        if !residual.is_finite() {
            return Err((Step::Regression, FkmdError::Numerical("regression residual is not finite".into())));
        }
        timings.regression_s = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let x0 = self.data.state(self.data.len()).to_vec();
        let spectral = |m: &KoopmanModel| koopman::predict(m, &features, &x0, cfg.prediction_steps, &cfg.mode_filter_predict);
        let rollout = |m: &KoopmanModel| koopman::predict_rollout(m, &features, &x0, cfg.prediction_steps, &cfg.mode_filter_predict);
        let full_state = model.n_outputs() == self.data.dim();
        let (primary, alternate) = match cfg.prediction_scheme {
            PredictionScheme::Spectral => (spectral(&model), full_state.then(|| rollout(&model))),
            PredictionScheme::Rollout => (rollout(&model), Some(spectral(&model))),
        };
        let primary = primary.map_err(at(Step::Prediction))?;
        let alternate = match alternate {
            Some(Ok(f)) => Some(self.uncenter(f.values)),
            Some(Err(e)) => {
                log::warn!("iteration {iteration}: alternate forecast failed: {e}");
                None
            }
            None => None,
        };
        timings.prediction_s = clock.elapsed().as_secs_f64();

        let mut diagnostics = Diagnostics {
            sigma,
            h: cfg.h,
            subsample: self.subsample.len(),
            n_features: model.n_features(),
            ridge: model.ridge(),
            regression_residual: residual,
            retained_predict_modes: primary.retained_modes.len(),
            retained_metric_modes: None,
            max_imag_residue: primary.max_imag_residue,
            degenerate_spectrum: model.is_degenerate(),
            constancy_deviation: None,
            metric_blocks: None,
            forecast_start: self.series_len,
        };

        let clock = Instant::now();
        let metric_learned = if update {
            let filter = &cfg.mode_filter_metric;
            diagnostics.retained_metric_modes = Some(koopman::apply_filter(&model, filter).len());
            let j = mahalanobis::collect_j(&model, &features, &sample, cfg.j_source, filter).map_err(at(Step::MetricUpdate))?;
            let raw = mahalanobis::assemble_metric(&j).map_err(at(Step::MetricUpdate))?;
            if cfg.constancy_trials > 0 {
                match mahalanobis::curvature_constancy(&j, &raw, 1.0, cfg.constancy_trials, cfg.seed) {
                    Ok(dev) => diagnostics.constancy_deviation = Some(dev),
                    Err(e) => log::warn!("iteration {iteration}: constancy diagnostic skipped: {e}"),
                }
            }
            let learned = mahalanobis::regularize_metric(&raw, cfg.metric_delta).map_err(at(Step::MetricUpdate))?;
            diagnostics.metric_blocks =
                Some(mahalanobis::block_norms(learned.matrix(), self.data.d_raw()).map_err(at(Step::MetricUpdate))?);
            Some(learned)
        } else {
            None
        };
        timings.metric_update_s = clock.elapsed().as_secs_f64();

        log::info!(
            "iteration {iteration}: sigma {sigma:.6e}, residual {residual:.3e}, {} modes kept, {:.1}s",
            primary.retained_modes.len(),
            timings.bandwidth_s + timings.regression_s + timings.prediction_s + timings.metric_update_s
        );

        if let Some(m) = &metric_learned {
            self.metric = m.clone();
        }
        Ok(IterationReport {
            iteration,
            bandwidth: BandwidthState {
                h: cfg.h,
                sigma,
                subsample: self.subsample.len(),
            },
            eigenvalues: model.eigen_table(),
            forecast: self.uncenter(primary.values),
            alternate_forecast: alternate,
            metric_used,
            metric_learned,
            diagnostics,
            timings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(t: usize) -> TimeSeries {
        let values: Vec<f64> = (0..t)
            .flat_map(|i| {
                let s = i as f64 * 0.1;
                [s.sin() + 3.0, (2.0 * s).cos()]
            })
            .collect();
        TimeSeries::new(values, 2, 0.1, None).unwrap()
    }

    fn small() -> FkmdConfig {
        FkmdConfig {
            ell: 2,
            iterations: 2,
            subsample: 40,
            prediction_steps: 5,
            mode_filter_metric: ModeFilter::top(6),
            constancy_trials: 5,
            metric_delta: 1e-8,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_config_fails_in_setup() {
        let cfg = FkmdConfig { iterations: 0, ..small() };
        let err = run(&cfg, &wave(50)).unwrap_err();
        assert_eq!(err.step, Step::Setup);
        assert!(matches!(err.source, FkmdError::InvalidParameter(_)));
    }

    #[test]
    fn reports_per_iteration() {
        let reports = run(&small(), &wave(60)).unwrap();
        assert_eq!(reports.len(), 2);
        for (i, r) in reports.iter().enumerate() {
            assert_eq!(r.iteration, i + 1);
            assert_eq!(r.forecast.nrows(), 5);
            assert_eq!(r.forecast.ncols(), 4);
            assert!(r.diagnostics.regression_residual.is_finite());
            assert!(r.metric_learned.is_some());
            assert_eq!(r.diagnostics.forecast_start, 60);
        }
    }

    #[test]
    fn ordinary_matches_first_iteration_without_update() {
        let cfg = small();
        let a = ordinary_kmd(&cfg, &wave(60)).unwrap();
        let b = run(&FkmdConfig { iterations: 1, ..cfg }, &wave(60)).unwrap().remove(0);
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.forecast, b.forecast);
        assert!(a.metric_learned.is_none());
    }

    #[test]
    fn centering_is_undone_in_forecasts() {
        let series = wave(60);
        let base = FkmdConfig {
            iterations: 1,
            ..small()
        };
        let plain = run(&base, &series).unwrap().remove(0);
        let centered = run(&FkmdConfig { center: true, ..base }, &series).unwrap().remove(0);
        // the kernel is shift invariant, so only the constant part of the
        // observable changes and the un-centered forecasts agree closely
        let diff = (0..5)
            .flat_map(|k| (0..4).map(move |c| (k, c)))
            .map(|(k, c)| (plain.forecast[(k, c)] - centered.forecast[(k, c)]).abs())
            .fold(0.0, f64::max);
        assert!(diff < 0.05, "{diff}");
    }
}
