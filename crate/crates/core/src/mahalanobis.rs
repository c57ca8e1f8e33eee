//! Learning the Mahalanobis matrix from Koopman eigenfunction gradients.
//!
//! Each iteration assembles `M = Σ_n Re(J(x_n) J(x_n)*)` over a subsample,
//! where `J(x)` is the gradient of the predicted rate of change of the
//! observable. At the start of the next iteration `M` is divided by
//! `(hσ)²`, with `σ` the spread of pairwise distances under `M^{1/2}`.

use faer::linalg::matmul::matmul;
use faer::{c64, Accum, Mat, MatRef, Par};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FkmdError, Result};
use crate::featurize::{psd_sqrt, FeatureMap, FeatureMatrix, MahalanobisMatrix};
use crate::koopman::{apply_filter, KoopmanModel, ModeFilter};
use crate::linalg::{self, sym_eigen, sym_function, ONE};
use crate::rng;
use crate::samples::{IndexedRows, SampleRows};

/// Gradient outer products per leaf of the assembly tree. Fixed, so the
/// reduction order never depends on the thread count.
const ASSEMBLY_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthState {
    pub h: f64,
    pub sigma: f64,
    pub subsample: usize,
}

/// Which estimate of the dynamical curvature `J(x)` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JSource {
    /// `Σ λ_m ∇φ_m(x) v_m*`.
    #[default]
    Modal,
    /// `Σ ((μ_m − 1)/τ) ∇φ_m(x) v_m*`, the one-lag difference quotient of
    /// the propagated observable instead of its time derivative.
    FiniteDifference,
    /// `(Σ λ_m φ_m(x) v_m*)*`, the predicted velocity of the full state,
    /// a `D × 1` column. Needs the identity observation.
    FullState,
}

#[derive(Debug, Clone)]
pub struct JEstimate {
    pub values: Vec<Mat<c64>>,
    pub source: JSource,
}

impl JEstimate {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |j| j.nrows())
    }
}

/// `min(count, n)` distinct indices from `0..n`, ascending, determined by
/// `seed`.
pub fn subsample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let count = count.min(n);
    let mut out = if count == n {
        (0..n).collect()
    } else {
        let mut rng = rng::stream(seed, rng::SUBSAMPLE_STREAM);
        index::sample(&mut rng, n, count).into_vec()
    };
    out.sort_unstable();
    out
}

/// Population standard deviation of all pairwise distances between
/// `M^{1/2} x_i`.
pub fn pairwise_distance_std<S: SampleRows + ?Sized>(points: &S, metric: &MahalanobisMatrix) -> Result<f64> {
    let k = points.n_rows();
    if k < 2 {
        return Err(FkmdError::InsufficientData {
            what: "points for pairwise distances",
            required: 2,
            actual: k,
        });
    }
    if points.dim() != metric.dim() {
        return Err(FkmdError::DimensionMismatch(format!(
            "points have dimension {}, metric {}",
            points.dim(),
            metric.dim()
        )));
    }
    let z: Vec<Vec<f64>> = (0..k).into_par_iter().map(|i| metric.transform(points.row(i))).collect();
    let dist = |i: usize, j: usize| -> f64 {
        z[i].iter().zip(&z[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    // two passes, each summed per row then across rows in index order
    let row_sums = |f: &(dyn Fn(f64) -> f64 + Sync)| -> f64 {
        let partial: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|i| (i + 1..k).map(|j| f(dist(i, j))).sum())
            .collect();
        partial.iter().sum()
    };
    let pairs = (k * (k - 1) / 2) as f64;
    let mean = row_sums(&|d| d) / pairs;
    let var = row_sums(&|d| (d - mean) * (d - mean)) / pairs;
    let sigma = var.sqrt();
    if !(sigma > 1e-12 * mean) || !sigma.is_finite() {
        return Err(FkmdError::DegenerateData(format!(
            "pairwise distances have no spread (std {sigma:e}, mean {mean:e})"
        )));
    }
    Ok(sigma)
}

/// `σ` over a seeded subsample of `x` of at most `subsample` rows.
pub fn estimate_sigma<S: SampleRows + ?Sized>(x: &S, metric: &MahalanobisMatrix, subsample: usize, seed: u64) -> Result<f64> {
    if subsample < 2 {
        return Err(FkmdError::InvalidParameter(format!("subsample must be at least 2, got {subsample}")));
    }
    let idx = subsample_indices(x.n_rows(), subsample, seed);
    pairwise_distance_std(&IndexedRows::new(x, &idx), metric)
}

/// `M / (hσ)²`.
pub fn rescale_metric(metric: &MahalanobisMatrix, h: f64, sigma: f64) -> Result<MahalanobisMatrix> {
    if !(h > 0.0 && h.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FkmdError::InvalidParameter(format!(
            "bandwidth factors must be positive, got h = {h}, sigma = {sigma}"
        )));
    }
    Ok(metric.scaled_down(h * sigma))
}

/// `M + δI`.
pub fn regularize_metric(metric: &MahalanobisMatrix, delta: f64) -> Result<MahalanobisMatrix> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(FkmdError::InvalidParameter(format!("metric ridge must be nonnegative, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(metric.clone());
    }
    let d = metric.dim();
    let m = Mat::from_fn(d, d, |i, j| metric.matrix()[(i, j)] + if i == j { delta } else { 0.0 });
    let sqrt = psd_sqrt(m.as_ref())?;
    Ok(MahalanobisMatrix::from_parts(m, sqrt, metric.ridge_delta() + delta))
}

/// `J(x)` from the modal expansion over the modes kept by `filter`.
pub fn compute_j_modal(model: &KoopmanModel, features: &FeatureMap, x: &[f64], filter: &ModeFilter) -> Result<Mat<c64>> {
    let sel = selected(model, filter)?;
    let coeff = model.weighted_modes(&sel, |m| model.log_eigenvalues()[m]);
    gradient_times(features, x, coeff.as_ref())
}

fn selected(model: &KoopmanModel, filter: &ModeFilter) -> Result<Vec<usize>> {
    let sel = apply_filter(model, filter);
    if sel.is_empty() {
        Err(FkmdError::EmptyModeSet)
    } else {
        Ok(sel)
    }
}

/// `∇ψ(x) · coeff`, `D × L`.
fn gradient_times(features: &FeatureMap, x: &[f64], coeff: MatRef<'_, c64>) -> Result<Mat<c64>> {
    let grad = features.feature_gradients(x)?;
    let mut out = Mat::zeros(grad.nrows(), coeff.ncols());
    match grad {
        FeatureMatrix::Real(g) => {
            let g = linalg::to_complex(g.as_ref());
            matmul(out.as_mut(), Accum::Replace, g.as_ref(), coeff, ONE, Par::Seq);
        }
        FeatureMatrix::Complex(g) => {
            matmul(out.as_mut(), Accum::Replace, g.as_ref(), coeff, ONE, Par::Seq);
        }
    }
    Ok(out)
}

/// `J(x_i)` for every row of `points`, in order.
pub fn collect_j<S: SampleRows + ?Sized>(
    model: &KoopmanModel,
    features: &FeatureMap,
    points: &S,
    source: JSource,
    filter: &ModeFilter,
) -> Result<JEstimate> {
    if features.n_features() != model.n_features() {
        return Err(FkmdError::DimensionMismatch(format!(
            "feature map has {} features, model {}",
            features.n_features(),
            model.n_features()
        )));
    }
    let sel = selected(model, filter)?;
    let lambda = model.log_eigenvalues();
    let mu = model.eigenvalues();
    let tau = model.lag();
    let coeff = match source {
        JSource::Modal | JSource::FullState => model.weighted_modes(&sel, |m| lambda[m]),
        JSource::FiniteDifference => model.weighted_modes(&sel, |m| (mu[m] - ONE) / tau),
    };
    if source == JSource::FullState && model.n_outputs() != features.dim() {
        return Err(FkmdError::Unsupported(format!(
            "full-state curvature needs the identity observation (L = D = {}), model has L = {}",
            features.dim(),
            model.n_outputs()
        )));
    }
    let values: Vec<Mat<c64>> = (0..points.n_rows())
        .into_par_iter()
        .map(|i| -> Result<Mat<c64>> {
            let x = points.row(i);
            let j = match source {
                JSource::FullState => {
                    let psi = features.feature_row(x);
                    Mat::from_fn(coeff.ncols(), 1, |l, _| {
                        psi.iter()
                            .enumerate()
                            .map(|(r, p)| p * coeff[(r, l)])
                            .sum::<c64>()
                            .conj()
                    })
                }
                _ => gradient_times(features, x, coeff.as_ref())?,
            };
            if (0..j.ncols()).any(|c| (0..j.nrows()).any(|r| !j[(r, c)].re.is_finite() || !j[(r, c)].im.is_finite())) {
                return Err(FkmdError::Numerical(format!("non-finite curvature at sample {i}")));
            }
            Ok(j)
        })
        .collect::<Result<_>>()?;
    Ok(JEstimate { values, source })
}

/// `Σ_n Re(J_n J_n*)`, symmetrized, as an unscaled metric.
pub fn assemble_metric(j: &JEstimate) -> Result<MahalanobisMatrix> {
    if j.is_empty() {
        return Err(FkmdError::InsufficientData {
            what: "curvature samples",
            required: 1,
            actual: 0,
        });
    }
    let d = j.dim();
    if let Some(bad) = j.values.iter().position(|v| v.nrows() != d) {
        return Err(FkmdError::DimensionMismatch(format!(
            "curvature sample {bad} has {} rows, expected {d}",
            j.values[bad].nrows()
        )));
    }
    let mut level: Vec<Mat<f64>> = j
        .values
        .par_chunks(ASSEMBLY_CHUNK)
        .map(|chunk| -> Result<Mat<f64>> {
            let width: usize = chunk.iter().map(|v| 2 * v.ncols()).sum();
            // [Re J_1, Im J_1, Re J_2, ...]; Re(JJ*) = Re J Re Jᵀ + Im J Im Jᵀ
            let mut stacked = Mat::<f64>::zeros(d, width);
            let mut col = 0;
            for v in chunk {
                for c in 0..v.ncols() {
                    for r in 0..d {
                        let z = v[(r, c)];
                        if !z.re.is_finite() || !z.im.is_finite() {
                            return Err(FkmdError::Numerical("non-finite curvature entry".into()));
                        }
                        stacked[(r, col)] = z.re;
                        stacked[(r, col + 1)] = z.im;
                    }
                    col += 2;
                }
            }
            let mut out = Mat::zeros(d, d);
            matmul(out.as_mut(), Accum::Replace, stacked.as_ref(), stacked.transpose(), 1.0, Par::Seq);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    while level.len() > 1 {
        level = level
            .par_chunks(2)
            .map(|pair| match pair {
                [a, b] => a + b,
                [a] => a.clone(),
                _ => unreachable!(),
            })
            .collect();
    }
    let mut m = level.pop().expect("nonempty");
    linalg::symmetrize_in_place(&mut m);
    let sqrt = psd_sqrt(m.as_ref())?;
    Ok(MahalanobisMatrix::from_parts(m, sqrt, 0.0))
}

/// Largest relative deviation of `f(u) = (1/N) Σ_n |uᵀ M^{-1/2} J_n|²` from
/// `scale²/N` over `trials` random unit vectors, where `metric` is the
/// assembly of `j` divided by `scale²`.
pub fn curvature_constancy(j: &JEstimate, metric: &MahalanobisMatrix, scale: f64, trials: usize, seed: u64) -> Result<f64> {
    let d = metric.dim();
    if j.is_empty() || j.dim() != d {
        return Err(FkmdError::DimensionMismatch(format!(
            "{} curvature samples of dimension {} for a metric of dimension {d}",
            j.len(),
            j.dim()
        )));
    }
    let (values, vectors) = sym_eigen(metric.matrix())?;
    let top = values.last().copied().unwrap_or(0.0);
    if !(values[0] > 1e-14 * top) {
        return Err(FkmdError::Numerical(format!(
            "metric is singular (smallest eigenvalue {:e}); add a ridge first",
            values[0]
        )));
    }
    let inv_sqrt = sym_function(&values, vectors.as_ref(), |w| 1.0 / w.sqrt());
    let n = j.len() as f64;
    let expected = scale * scale / n;
    let mut rng = rng::stream(seed, rng::CONSTANCY_STREAM);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = linalg::dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let z = linalg::mat_vec(inv_sqrt.as_ref(), &u);
        let total: f64 = j
            .values
            .iter()
            .map(|jn| {
                (0..jn.ncols())
                    .map(|c| (0..d).map(|r| jn[(r, c)] * z[r]).sum::<c64>().norm_sqr())
                    .sum::<f64>()
            })
            .sum();
        worst = worst.max((total / n - expected).abs() / expected);
    }
    Ok(worst)
}

/// Frobenius norms of the metric's sub-blocks, grouped by raw channel and
/// by delay. Embedded coordinate `i` is channel `i % d` at delay `i / d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBlocks {
    /// `d × d`, row-major.
    pub channel: Vec<Vec<f64>>,
    /// `ℓ × ℓ`, row-major.
    pub delay: Vec<Vec<f64>>,
}

pub fn block_norms(metric: MatRef<'_, f64>, n_channels: usize) -> Result<MetricBlocks> {
    let dim = metric.nrows();
    if n_channels == 0 || dim % n_channels != 0 {
        return Err(FkmdError::DimensionMismatch(format!(
            "metric dimension {dim} is not a multiple of {n_channels} channels"
        )));
    }
    let ell = dim / n_channels;
    let mut channel = vec![vec![0.0; n_channels]; n_channels];
    let mut delay = vec![vec![0.0; ell]; ell];
    for j in 0..dim {
        for i in 0..dim {
            let sq = metric[(i, j)] * metric[(i, j)];
            channel[i % n_channels][j % n_channels] += sq;
            delay[i / n_channels][j / n_channels] += sq;
        }
    }
    for row in channel.iter_mut().chain(delay.iter_mut()) {
        row.iter_mut().for_each(|v| *v = v.sqrt());
    }
    Ok(MetricBlocks { channel, delay })
}
