//! Double time embedding of a series into paired samples `(x_n, y_n)`.
//!
//! Sample `x_{n+1}` is the window `[x(nτ), …, x((n+ℓ−1)τ)]` and `y_{n+1}` the
//! same window one lag later. Inside a window the channels of one time step
//! are contiguous, and time steps follow in order, which is exactly the
//! row-major layout of [`TimeSeries`]. Windows are therefore served as
//! borrowed slices of the series; nothing is copied unless
//! [`EmbeddedDataset::materialize`] is asked for.

use std::sync::Arc;

use crate::error::{FkmdError, Result};
use crate::samples::{RowMatrix, WindowRows};
use crate::tseries::TimeSeries;

#[derive(Debug, Clone)]
pub struct EmbeddedDataset {
    series: Arc<TimeSeries>,
    ell: usize,
}

impl EmbeddedDataset {
    pub fn new(series: Arc<TimeSeries>, ell: usize) -> Result<Self> {
        if ell == 0 {
            return Err(FkmdError::InvalidParameter("embedding length must be at least 1".into()));
        }
        if series.len() <= ell {
            return Err(FkmdError::InsufficientData {
                what: "time points for the requested embedding length",
                required: ell + 1,
                actual: series.len(),
            });
        }
        Ok(Self { series, ell })
    }

    /// Number of sample pairs, `N = T − ℓ`.
    pub fn len(&self) -> usize {
        self.series.len() - self.ell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn lag(&self) -> f64 {
        self.series.lag()
    }

    pub fn d_raw(&self) -> usize {
        self.series.n_channels()
    }

    /// Embedded dimension `D = ℓ·d`.
    pub fn dim(&self) -> usize {
        self.ell * self.d_raw()
    }

    pub fn series(&self) -> &TimeSeries {
        &self.series
    }

    pub fn x(&self, n: usize) -> &[f64] {
        self.state(n)
    }

    pub fn y(&self, n: usize) -> &[f64] {
        assert!(n < self.len());
        self.state(n + 1)
    }

    /// Window starting at time index `n`, for `n` in `0..=N`.
    pub fn state(&self, n: usize) -> &[f64] {
        let d = self.d_raw();
        &self.series.as_slice()[n * d..(n + self.ell) * d]
    }

    /// Inputs `x_1..x_N`.
    pub fn inputs(&self) -> WindowRows<'_> {
        WindowRows::new(self.series.as_slice(), self.d_raw(), self.dim(), 0, self.len())
    }

    /// Outputs `y_1..y_N`.
    pub fn outputs(&self) -> WindowRows<'_> {
        WindowRows::new(self.series.as_slice(), self.d_raw(), self.dim(), 1, self.len())
    }

    /// All `N + 1` windows; inputs are rows `0..N`, outputs rows `1..=N`.
    pub fn states(&self) -> WindowRows<'_> {
        WindowRows::new(self.series.as_slice(), self.d_raw(), self.dim(), 0, self.len() + 1)
    }

    /// Dense copies of `X` and `Y`.
    pub fn materialize(&self) -> (RowMatrix, RowMatrix) {
        (RowMatrix::collect(&self.inputs()), RowMatrix::collect(&self.outputs()))
    }

    /// Label for embedded coordinate `i`: `channel[delay]`.
    pub fn coordinate_name(&self, i: usize) -> String {
        let d = self.d_raw();
        format!("{}[{}]", self.series.channel_names()[i % d], i / d)
    }
}

pub fn embed(series: &TimeSeries, ell: usize) -> Result<EmbeddedDataset> {
    EmbeddedDataset::new(Arc::new(series.clone()), ell)
}

/// The embedded state whose window ends just before time index `end_index`,
/// i.e. rows `end_index − ℓ .. end_index`. With `end_index = T` this is the
/// forecast seed at the end of the series.
pub fn embedding_of_prefix(series: &TimeSeries, ell: usize, end_index: usize) -> Result<Vec<f64>> {
    if ell == 0 {
        return Err(FkmdError::InvalidParameter("embedding length must be at least 1".into()));
    }
    if end_index < ell {
        return Err(FkmdError::InsufficientData {
            what: "time points before the forecast origin",
            required: ell,
            actual: end_index,
        });
    }
    if end_index > series.len() {
        return Err(FkmdError::InvalidParameter(format!(
            "end index {end_index} beyond series of length {}",
            series.len()
        )));
    }
    let d = series.n_channels();
    Ok(series.as_slice()[(end_index - ell) * d..end_index * d].to_vec())
}
