//! Feature maps: Mahalanobis kernel features centred on training samples,
//! and random Fourier features that sample the same kernel.

use faer::{c64, Mat, MatRef};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{FkmdError, Result};
use crate::linalg::{self, sym_eigen, sym_function};
use crate::rng;
use crate::samples::{RowMatrix, SampleRows};

/// Rows per tile when assembling feature matrices.
pub const TILE_ROWS: usize = 1024;

/// Frequencies are standard normal draws scaled by √2. With that scaling
/// `E[conj ψ(x) ψ(x')] = exp(−(x−x')ᵀ M (x−x'))`, the kernel used by the
/// kernel features, rather than the half-width kernel obtained with unit
/// variance.
pub const FREQUENCY_SCALE: f64 = std::f64::consts::SQRT_2;

/// Real symmetric PSD metric `M` with its square root.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisMatrix {
    m: Mat<f64>,
    sqrt: Mat<f64>,
    ridge_delta: f64,
}

impl MahalanobisMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            m: Mat::identity(dim, dim),
            sqrt: Mat::identity(dim, dim),
            ridge_delta: 0.0,
        }
    }

    /// Validate, symmetrize and take the square root of `m`.
    pub fn new(m: Mat<f64>) -> Result<Self> {
        let scale = 1.0 + linalg::max_abs(m.as_ref());
        let asym = linalg::max_abs_asymmetry(m.as_ref());
        if asym > 1e-12 * scale {
            return Err(FkmdError::InvalidParameter(format!(
                "metric is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let mut m = m;
        linalg::symmetrize_in_place(&mut m);
        let sqrt = psd_sqrt(m.as_ref())?;
        Ok(Self {
            m,
            sqrt,
            ridge_delta: 0.0,
        })
    }

    pub(crate) fn from_parts(m: Mat<f64>, sqrt: Mat<f64>, ridge_delta: f64) -> Self {
        Self { m, sqrt, ridge_delta }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.m.as_ref()
    }

    pub fn sqrt(&self) -> MatRef<'_, f64> {
        self.sqrt.as_ref()
    }

    /// Total ridge `δ` added to this metric since assembly.
    pub fn ridge_delta(&self) -> f64 {
        self.ridge_delta
    }

    /// `δᵀ M δ` for `δ = x − xp`.
    pub fn quad_form(&self, x: &[f64], xp: &[f64]) -> f64 {
        let n = self.dim();
        let delta: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for j in 0..n {
            if delta[j] == 0.0 {
                continue;
            }
            let mut col = 0.0;
            for i in 0..n {
                col += self.m[(i, j)] * delta[i];
            }
            s += col * delta[j];
        }
        s
    }

    /// `M^{1/2} x`.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        linalg::mat_vec(self.sqrt.as_ref(), x)
    }

    /// `M / c²`, with the root scaled by `1/c`.
    pub(crate) fn scaled_down(&self, c: f64) -> Self {
        Self {
            m: Mat::from_fn(self.dim(), self.dim(), |i, j| self.m[(i, j)] / (c * c)),
            sqrt: Mat::from_fn(self.dim(), self.dim(), |i, j| self.sqrt[(i, j)] / c),
            ridge_delta: self.ridge_delta / (c * c),
        }
    }
}

/// Symmetric PSD square root via symmetric eigendecomposition. Eigenvalues
/// down to `−1e-10·‖M‖₂` are treated as rounding noise and clamped to zero.
pub fn psd_sqrt(m: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if m.nrows() != m.ncols() {
        return Err(FkmdError::DimensionMismatch(format!(
            "square root of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = 1.0 + linalg::max_abs(m);
    if linalg::max_abs_asymmetry(m) > 1e-12 * scale {
        return Err(FkmdError::InvalidParameter("matrix is not symmetric".into()));
    }
    let (values, vectors) = sym_eigen(m)?;
    let norm2 = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = values.first().copied().unwrap_or(0.0);
    if min < -1e-10 * norm2 {
        return Err(FkmdError::NotPsd { min_eigenvalue: min });
    }
    Ok(sym_function(&values, vectors.as_ref(), |w| w.max(0.0).sqrt()))
}

/// `exp(−(x−xp)ᵀ M (x−xp))`.
pub fn kernel_eval(metric: &MahalanobisMatrix, x: &[f64], xp: &[f64]) -> f64 {
    (-metric.quad_form(x, xp)).exp()
}

/// A feature matrix (or gradient matrix) that is real for kernel features
/// and complex for Fourier features.
#[derive(Debug, Clone)]
pub enum FeatureMatrix {
    Real(Mat<f64>),
    Complex(Mat<c64>),
}

impl FeatureMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            FeatureMatrix::Real(m) => m.nrows(),
            FeatureMatrix::Complex(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            FeatureMatrix::Real(m) => m.ncols(),
            FeatureMatrix::Complex(m) => m.ncols(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        match self {
            FeatureMatrix::Real(m) => c64::new(m[(i, j)], 0.0),
            FeatureMatrix::Complex(m) => m[(i, j)],
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, FeatureMatrix::Real(_))
    }

    pub fn to_complex(&self) -> Mat<c64> {
        match self {
            FeatureMatrix::Real(m) => linalg::to_complex(m.as_ref()),
            FeatureMatrix::Complex(m) => m.clone(),
        }
    }

    pub fn into_complex(self) -> Mat<c64> {
        match self {
            FeatureMatrix::Real(m) => linalg::to_complex(m.as_ref()),
            FeatureMatrix::Complex(m) => m,
        }
    }
}

/// Gaussian Mahalanobis kernels centred on the training inputs (`R = N`).
#[derive(Debug, Clone)]
pub struct KernelFeatures {
    centers: RowMatrix,
    transformed: RowMatrix,
    metric: MahalanobisMatrix,
}

impl KernelFeatures {
    pub fn new(centers: RowMatrix, metric: MahalanobisMatrix) -> Result<Self> {
        if centers.dim() != metric.dim() {
            return Err(FkmdError::DimensionMismatch(format!(
                "centers have dimension {}, metric {}",
                centers.dim(),
                metric.dim()
            )));
        }
        let mut t = Vec::with_capacity(centers.n_rows() * centers.dim());
        for i in 0..centers.n_rows() {
            t.extend(metric.transform(centers.row(i)));
        }
        let transformed = RowMatrix::new(t, centers.dim())?;
        Ok(Self {
            centers,
            transformed,
            metric,
        })
    }

    pub fn centers(&self) -> &RowMatrix {
        &self.centers
    }

    pub fn metric(&self) -> &MahalanobisMatrix {
        &self.metric
    }

    fn row_into(&self, x: &[f64], out: &mut [f64]) {
        let xt = self.metric.transform(x);
        for (m, o) in out.iter_mut().enumerate() {
            let c = self.transformed.row(m);
            let d2: f64 = xt.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = (-d2).exp();
        }
    }

    fn gradients(&self, x: &[f64]) -> Mat<f64> {
        let n = self.centers.n_rows();
        let mut values = vec![0.0; n];
        self.row_into(x, &mut values);
        let m = self.metric.matrix();
        let dim = self.metric.dim();
        let mut out = Mat::zeros(dim, n);
        for (j, &k) in values.iter().enumerate() {
            let delta: Vec<f64> = x.iter().zip(self.centers.row(j)).map(|(a, b)| a - b).collect();
            let md = linalg::mat_vec(m, &delta);
            for i in 0..dim {
                out[(i, j)] = -2.0 * md[i] * k;
            }
        }
        out
    }
}

/// Random Fourier features `exp(i ωᵀ M^{1/2} x)`.
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    omegas: Mat<f64>,
    metric: MahalanobisMatrix,
    seed: u64,
    /// Row m is `FREQUENCY_SCALE · M^{1/2} ω_m`, stored row-major.
    projection: RowMatrix,
}

impl FourierFeatures {
    /// Draw `n_features` frequency vectors from stream `stream` of `seed`.
    pub fn draw(metric: MahalanobisMatrix, n_features: usize, seed: u64, stream: u64) -> Result<Self> {
        if n_features == 0 {
            return Err(FkmdError::InvalidParameter("need at least one Fourier feature".into()));
        }
        let dim = metric.dim();
        let mut rng = rng::stream(seed, stream);
        // row-major draw order so the first rows do not depend on n_features
        let mut draws = vec![0.0; n_features * dim];
        for v in draws.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let omegas = Mat::from_fn(n_features, dim, |i, j| draws[i * dim + j]);
        Self::with_omegas(omegas, metric, seed)
    }

    /// Reuse a fixed set of frequencies under a (possibly new) metric.
    pub fn with_omegas(omegas: Mat<f64>, metric: MahalanobisMatrix, seed: u64) -> Result<Self> {
        if omegas.ncols() != metric.dim() {
            return Err(FkmdError::DimensionMismatch(format!(
                "frequencies have dimension {}, metric {}",
                omegas.ncols(),
                metric.dim()
            )));
        }
        let mut p = Vec::with_capacity(omegas.nrows() * omegas.ncols());
        let s = metric.sqrt();
        for m in 0..omegas.nrows() {
            let w: Vec<f64> = (0..omegas.ncols()).map(|j| omegas[(m, j)]).collect();
            p.extend(linalg::mat_vec(s, &w).into_iter().map(|v| FREQUENCY_SCALE * v));
        }
        let projection = RowMatrix::new(p, omegas.ncols())?;
        Ok(Self {
            omegas,
            metric,
            seed,
            projection,
        })
    }

    pub fn omegas(&self) -> MatRef<'_, f64> {
        self.omegas.as_ref()
    }

    pub fn metric(&self) -> &MahalanobisMatrix {
        &self.metric
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn phases(&self, x: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let x = x.to_vec();
        (0..self.projection.n_rows()).map(move |m| linalg::dot(self.projection.row(m), &x))
    }

    fn row_into(&self, x: &[f64], out: &mut [c64]) {
        for (o, theta) in out.iter_mut().zip(self.phases(x)) {
            let (s, c) = theta.sin_cos();
            *o = c64::new(c, s);
        }
    }

    fn gradients(&self, x: &[f64]) -> Mat<c64> {
        let r = self.projection.n_rows();
        let dim = self.projection.dim();
        let mut values = vec![linalg::ZERO; r];
        self.row_into(x, &mut values);
        let mut out = Mat::zeros(dim, r);
        for (m, psi) in values.iter().enumerate() {
            let ipsi = linalg::I * psi;
            for (i, p) in self.projection.row(m).iter().enumerate() {
                out[(i, m)] = ipsi * p;
            }
        }
        out
    }
}

/// Monte-Carlo estimate `(1/R) Σ Re(conj ψ_m(x) ψ_m(xp))` of `k_M(x, xp)`.
pub fn rff_gram_estimate(features: &FourierFeatures, x: &[f64], xp: &[f64]) -> f64 {
    let r = features.projection.n_rows();
    let total: f64 = features
        .phases(x)
        .zip(features.phases(xp))
        .map(|(a, b)| (b - a).cos())
        .sum();
    total / r as f64
}

#[derive(Debug, Clone)]
pub enum FeatureMap {
    Kernel(KernelFeatures),
    Fourier(FourierFeatures),
}

impl FeatureMap {
    pub fn n_features(&self) -> usize {
        match self {
            FeatureMap::Kernel(k) => k.centers.n_rows(),
            FeatureMap::Fourier(f) => f.projection.n_rows(),
        }
    }

    pub fn dim(&self) -> usize {
        self.metric().dim()
    }

    pub fn metric(&self) -> &MahalanobisMatrix {
        match self {
            FeatureMap::Kernel(k) => &k.metric,
            FeatureMap::Fourier(f) => &f.metric,
        }
    }

    /// `ψ(x)` as a complex row.
    pub fn feature_row(&self, x: &[f64]) -> Vec<c64> {
        match self {
            FeatureMap::Kernel(k) => {
                let mut out = vec![0.0; self.n_features()];
                k.row_into(x, &mut out);
                out.into_iter().map(|v| c64::new(v, 0.0)).collect()
            }
            FeatureMap::Fourier(f) => {
                let mut out = vec![linalg::ZERO; self.n_features()];
                f.row_into(x, &mut out);
                out
            }
        }
    }

    /// `n × R` matrix with entry `(i, m) = ψ_m(points_i)`, assembled in
    /// parallel row tiles. Every entry is computed independently, so the
    /// result does not depend on the thread count.
    pub fn feature_matrix<S: SampleRows + ?Sized>(&self, points: &S) -> Result<FeatureMatrix> {
        self.check_dim(points.dim())?;
        let n = points.n_rows();
        let r = self.n_features();
        Ok(match self {
            FeatureMap::Kernel(k) => {
                let tiles = tiled(n, r, 0.0, |i, out| k.row_into(points.row(i), out));
                let mut m = Mat::zeros(n, r);
                scatter(&tiles, r, |i, j, v| m[(i, j)] = v);
                FeatureMatrix::Real(m)
            }
            FeatureMap::Fourier(f) => {
                let tiles = tiled(n, r, linalg::ZERO, |i, out| f.row_into(points.row(i), out));
                let mut m = Mat::zeros(n, r);
                scatter(&tiles, r, |i, j, v| m[(i, j)] = v);
                FeatureMatrix::Complex(m)
            }
        })
    }

    /// Complex feature matrix for rows `start..start + len` of `points`.
    pub(crate) fn feature_block<S: SampleRows + ?Sized>(&self, points: &S, start: usize, len: usize) -> Mat<c64> {
        let r = self.n_features();
        let rows: Vec<Vec<c64>> = (start..start + len)
            .into_par_iter()
            .map(|i| self.feature_row(points.row(i)))
            .collect();
        Mat::from_fn(len, r, |i, j| rows[i][j])
    }

    /// `D × R` matrix whose column m is `∇ψ_m(x)`.
    pub fn feature_gradients(&self, x: &[f64]) -> Result<FeatureMatrix> {
        self.check_dim(x.len())?;
        Ok(match self {
            FeatureMap::Kernel(k) => FeatureMatrix::Real(k.gradients(x)),
            FeatureMap::Fourier(f) => FeatureMatrix::Complex(f.gradients(x)),
        })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(FkmdError::DimensionMismatch(format!(
                "points have dimension {d}, features expect {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

fn tiled<T: Copy + Send + Sync>(
    n: usize,
    r: usize,
    zero: T,
    fill: impl Fn(usize, &mut [T]) + Sync,
) -> Vec<Vec<T>> {
    let n_tiles = n.div_ceil(TILE_ROWS);
    (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let start = t * TILE_ROWS;
            let end = (start + TILE_ROWS).min(n);
            let mut buf = vec![zero; (end - start) * r];
            for (k, i) in (start..end).enumerate() {
                fill(i, &mut buf[k * r..(k + 1) * r]);
            }
            buf
        })
        .collect()
}

fn scatter<T: Copy>(tiles: &[Vec<T>], r: usize, mut set: impl FnMut(usize, usize, T)) {
    let mut row = 0;
    for tile in tiles {
        for chunk in tile.chunks(r.max(1)) {
            for (j, &v) in chunk.iter().enumerate() {
                set(row, j, v);
            }
            row += 1;
        }
    }
}
