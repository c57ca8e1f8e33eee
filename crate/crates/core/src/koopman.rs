//! Koopman matrix estimation, spectral decomposition and forecasting.
//!
//! `K` and `B` solve the ridge problems `Ψx K ≈ Ψy` and `Ψx B ≈ G` through
//! their normal equations. The normal matrices can be accumulated tile by
//! tile ([`NormalEquations`]) so that `Ψx` never has to exist in full.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{c64, Accum, Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{FkmdError, Result};
use crate::featurize::{FeatureMap, FeatureMatrix};
use crate::linalg::{self, ONE};

/// Which embedded coordinates the observable `g` records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMap {
    /// `g(x) = xᵀ`, `L = D`.
    Identity,
    /// Selected coordinates (0-based), `L` = list length.
    Indices(Vec<usize>),
}

impl ObservationMap {
    pub fn n_outputs(&self, dim: usize) -> usize {
        match self {
            ObservationMap::Identity => dim,
            ObservationMap::Indices(idx) => idx.len(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let ObservationMap::Indices(idx) = self {
            if idx.is_empty() {
                return Err(FkmdError::InvalidParameter("observation index list is empty".into()));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= dim) {
                return Err(FkmdError::InvalidParameter(format!(
                    "observation index {bad} outside embedded dimension {dim}"
                )));
            }
        }
        Ok(())
    }

    /// Embedded coordinate recorded by output `l`.
    pub fn coordinate(&self, l: usize) -> usize {
        match self {
            ObservationMap::Identity => l,
            ObservationMap::Indices(idx) => idx[l],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ObservationMap::Identity => x.to_vec(),
            ObservationMap::Indices(idx) => idx.iter().map(|&i| x[i]).collect(),
        }
    }
}

/// Ridge parameter for the regressions. Serialized as `"auto"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RidgeRepr", into = "RidgeRepr")]
pub enum Ridge {
    /// `1e-8 · trace(Ψx*Ψx) / R`.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RidgeRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<RidgeRepr> for Ridge {
    type Error = String;

    fn try_from(r: RidgeRepr) -> std::result::Result<Self, String> {
        match r {
            RidgeRepr::Value(b) => Ok(Ridge::Fixed(b)),
            RidgeRepr::Name(s) if s == "auto" => Ok(Ridge::Auto),
            RidgeRepr::Name(s) => Err(format!("ridge must be \"auto\" or a number, got \"{s}\"")),
        }
    }
}

impl From<Ridge> for RidgeRepr {
    fn from(r: Ridge) -> Self {
        match r {
            Ridge::Auto => RidgeRepr::Name("auto".into()),
            Ridge::Fixed(b) => RidgeRepr::Value(b),
        }
    }
}

impl Ridge {
    pub const AUTO_FACTOR: f64 = 1e-8;

    fn resolve(self, trace: f64, r: usize) -> Result<f64> {
        match self {
            Ridge::Auto => Ok(Self::AUTO_FACTOR * trace / r as f64),
            Ridge::Fixed(b) if b >= 0.0 && b.is_finite() => Ok(b),
            Ridge::Fixed(b) => Err(FkmdError::InvalidParameter(format!("ridge must be nonnegative, got {b}"))),
        }
    }
}

/// Mode retention rule on `λ_m`. Bounds compose conjunctively; `top_k`
/// then keeps the modes with the largest real part. Unbounded limits are
/// left out when serialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeFilter {
    #[serde(default = "pos_inf", skip_serializing_if = "is_unbounded")]
    pub re_max: f64,
    #[serde(default = "pos_inf", skip_serializing_if = "is_unbounded")]
    pub im_max: f64,
    #[serde(default = "neg_inf", skip_serializing_if = "is_unbounded")]
    pub re_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn is_unbounded(v: &f64) -> bool {
    v.is_infinite()
}

impl Default for ModeFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl ModeFilter {
    pub fn all() -> Self {
        Self {
            re_max: f64::INFINITY,
            im_max: f64::INFINITY,
            re_min: f64::NEG_INFINITY,
            top_k: None,
        }
    }

    pub fn top(k: usize) -> Self {
        Self {
            top_k: Some(k),
            ..Self::all()
        }
    }

    fn admits(&self, lambda: c64) -> bool {
        lambda.re >= self.re_min && lambda.re <= self.re_max && lambda.im.abs() <= self.im_max
    }
}

/// One row of the exported eigenvalue table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenRow {
    pub index: usize,
    pub mu: (f64, f64),
    pub lambda: (f64, f64),
    pub mode_norm: f64,
}

#[derive(Debug, Clone)]
pub struct KoopmanModel {
    k: Mat<c64>,
    b: Mat<c64>,
    mu: Vec<c64>,
    lambda: Vec<c64>,
    xi: Mat<c64>,
    w: Mat<c64>,
    modes: Mat<c64>,
    lag: f64,
    ridge: f64,
    degenerate: bool,
}

impl KoopmanModel {
    pub fn koopman_matrix(&self) -> MatRef<'_, c64> {
        self.k.as_ref()
    }

    pub fn observable_coefficients(&self) -> MatRef<'_, c64> {
        self.b.as_ref()
    }

    /// Discrete-time eigenvalues `μ_m`.
    pub fn eigenvalues(&self) -> &[c64] {
        &self.mu
    }

    /// Continuous-time eigenvalues `λ_m = log(μ_m)/τ` (principal branch,
    /// so `|Im λ_m| ≤ π/τ`).
    pub fn log_eigenvalues(&self) -> &[c64] {
        &self.lambda
    }

    /// Right eigenvectors as columns.
    pub fn right_eigenvectors(&self) -> MatRef<'_, c64> {
        self.xi.as_ref()
    }

    /// Left eigenvectors as columns, scaled so that `w_m* ξ_m = 1`.
    pub fn left_eigenvectors(&self) -> MatRef<'_, c64> {
        self.w.as_ref()
    }

    /// Koopman modes; row `m` is `v_m* = w_m* B`.
    pub fn modes(&self) -> MatRef<'_, c64> {
        self.modes.as_ref()
    }

    pub fn lag(&self) -> f64 {
        self.lag
    }

    /// Ridge value actually used (after resolving [`Ridge::Auto`]).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// True when two eigenvalues coincide to within `1e-8` relative; the
    /// reconstruction `K = Σ μ ξ w*` is then not guaranteed.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn n_features(&self) -> usize {
        self.k.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn eigen_table(&self) -> Vec<EigenRow> {
        (0..self.mu.len())
            .map(|m| EigenRow {
                index: m,
                mu: (self.mu[m].re, self.mu[m].im),
                lambda: (self.lambda[m].re, self.lambda[m].im),
                mode_norm: (0..self.modes.ncols())
                    .map(|l| self.modes[(m, l)].norm_sqr())
                    .sum::<f64>()
                    .sqrt(),
            })
            .collect()
    }

    /// `Σ_{m ∈ modes} rate_m ξ_m v_m*`, an `R × L` matrix.
    pub(crate) fn weighted_modes(&self, modes: &[usize], rate: impl Fn(usize) -> c64) -> Mat<c64> {
        let r = self.n_features();
        let l = self.n_outputs();
        let xi_sel = Mat::from_fn(r, modes.len(), |i, j| self.xi[(i, modes[j])]);
        let v_sel = Mat::from_fn(modes.len(), l, |i, j| rate(modes[i]) * self.modes[(modes[i], j)]);
        let mut out = Mat::zeros(r, l);
        matmul(out.as_mut(), Accum::Replace, xi_sel.as_ref(), v_sel.as_ref(), ONE, linalg::par());
        out
    }
}

/// Accumulated normal equations `Ψx*Ψx`, `Ψx*Ψy`, `Ψx*G`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    gram: Mat<c64>,
    cross: Mat<c64>,
    obs: Mat<c64>,
    y_norm_sq: f64,
    rows: usize,
}

impl NormalEquations {
    pub fn new(n_features: usize, n_outputs: usize) -> Self {
        Self {
            gram: Mat::zeros(n_features, n_features),
            cross: Mat::zeros(n_features, n_features),
            obs: Mat::zeros(n_features, n_outputs),
            y_norm_sq: 0.0,
            rows: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn accumulate(&mut self, psi_x: MatRef<'_, c64>, psi_y: MatRef<'_, c64>, g: MatRef<'_, c64>) -> Result<()> {
        let r = self.gram.nrows();
        if psi_x.ncols() != r || psi_y.ncols() != r || g.ncols() != self.obs.ncols() {
            return Err(FkmdError::DimensionMismatch(format!(
                "block has {}/{} features and {} outputs, expected {r} and {}",
                psi_x.ncols(),
                psi_y.ncols(),
                g.ncols(),
                self.obs.ncols()
            )));
        }
        if psi_y.nrows() != psi_x.nrows() || g.nrows() != psi_x.nrows() {
            return Err(FkmdError::DimensionMismatch(format!(
                "block row counts differ: {} / {} / {}",
                psi_x.nrows(),
                psi_y.nrows(),
                g.nrows()
            )));
        }
        let par = linalg::par();
        matmul(self.gram.as_mut(), Accum::Add, psi_x.adjoint(), psi_x, ONE, par);
        matmul(self.cross.as_mut(), Accum::Add, psi_x.adjoint(), psi_y, ONE, par);
        matmul(self.obs.as_mut(), Accum::Add, psi_x.adjoint(), g, ONE, par);
        self.y_norm_sq += linalg::frobenius_c(psi_y).powi(2);
        self.rows += psi_x.nrows();
        Ok(())
    }

    /// Solve for `K` and `B`, decompose `K`, and report the relative
    /// training residual `‖ΨxK − Ψy‖_F / ‖Ψy‖_F` computed from the
    /// accumulated products.
    pub fn solve(&self, ridge: Ridge, lag: f64) -> Result<(KoopmanModel, f64)> {
        if !(lag > 0.0 && lag.is_finite()) {
            return Err(FkmdError::InvalidParameter(format!("lag must be positive, got {lag}")));
        }
        let r = self.gram.nrows();
        if r == 0 {
            return Err(FkmdError::InvalidParameter("need at least one feature".into()));
        }
        let trace: f64 = (0..r).map(|i| self.gram[(i, i)].re).sum();
        let beta = ridge.resolve(trace, r)?;
        let (k, b) = solve_normal(self.gram.as_ref(), self.cross.as_ref(), self.obs.as_ref(), beta)?;

        // ‖ΨxK − Ψy‖² = tr(K*AK) − 2 Re tr(K*C) + ‖Ψy‖²
        let ak = &self.gram * &k;
        let mut quad = 0.0;
        let mut lin = 0.0;
        for j in 0..r {
            for i in 0..r {
                quad += (k[(i, j)].conj() * ak[(i, j)]).re;
                lin += (k[(i, j)].conj() * self.cross[(i, j)]).re;
            }
        }
        let res_sq = (quad - 2.0 * lin + self.y_norm_sq).max(0.0);
        let residual = if self.y_norm_sq > 0.0 {
            (res_sq / self.y_norm_sq).sqrt()
        } else {
            res_sq.sqrt()
        };

        let model = decompose(k, b, lag, beta)?;
        Ok((model, residual))
    }
}

fn solve_normal(gram: MatRef<'_, c64>, cross: MatRef<'_, c64>, obs: MatRef<'_, c64>, beta: f64) -> Result<(Mat<c64>, Mat<c64>)> {
    let r = gram.nrows();
    let mut a = gram.to_owned();
    for i in 0..r {
        a[(i, i)] += c64::new(beta, 0.0);
    }
    match a.llt(Side::Lower) {
        Ok(llt) => {
            if beta == 0.0 {
                let l = llt.L();
                let diag: Vec<f64> = (0..r).map(|i| l[(i, i)].norm_sqr()).collect();
                let max = diag.iter().cloned().fold(0.0, f64::max);
                let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(min > (r as f64) * f64::EPSILON * max) {
                    return Err(FkmdError::RankDeficient);
                }
            }
            Ok((llt.solve(cross), llt.solve(obs)))
        }
        Err(_) if beta == 0.0 => Err(FkmdError::RankDeficient),
        Err(_) => {
            // ridge too small to overcome rounding in an indefinite-looking
            // normal matrix; pivoted LU still gives the regularized solve
            let lu = a.partial_piv_lu();
            Ok((lu.solve(cross), lu.solve(obs)))
        }
    }
}

/// Eigendecompose `K`, normalize left/right pairs and form the modes.
fn decompose(k: Mat<c64>, b: Mat<c64>, lag: f64, ridge: f64) -> Result<KoopmanModel> {
    let r = k.nrows();
    let eig_err = |e| FkmdError::Numerical(format!("eigendecomposition failed: {e:?}"));
    let evd = if linalg::is_exactly_real(k.as_ref()) {
        // a real K yields exact conjugate pairs through the real solver
        let kr = Mat::from_fn(r, r, |i, j| k[(i, j)].re);
        kr.eigen().map_err(eig_err)?
    } else {
        k.eigen().map_err(eig_err)?
    };
    let xi = evd.U().to_owned();
    let mu: Vec<c64> = (0..r).map(|i| evd.S()[i]).collect();
    if mu.iter().any(|m| !m.re.is_finite() || !m.im.is_finite()) {
        return Err(FkmdError::Numerical("non-finite Koopman eigenvalue".into()));
    }

    let degenerate = has_close_pair(&mu);
    if degenerate {
        log::warn!("Koopman matrix has repeated eigenvalues; reconstruction is not guaranteed");
    }

    let inv = xi.partial_piv_lu().inverse();
    let cond = linalg::norm_one_c(xi.as_ref()) * linalg::norm_one_c(inv.as_ref());
    let mut w = if cond.is_finite() && cond <= 1e12 {
        inv.adjoint().to_owned()
    } else {
        log::warn!("eigenvector matrix condition {cond:e}; solving the adjoint problem for left eigenvectors");
        adjoint_left_vectors(k.as_ref(), &mu)?
    };
    // enforce w_m* ξ_m = 1 exactly up to rounding
    for m in 0..r {
        let s: c64 = (0..r).map(|i| w[(i, m)].conj() * xi[(i, m)]).sum();
        if s.norm() == 0.0 || !s.re.is_finite() {
            return Err(FkmdError::Numerical(format!("left eigenvector {m} is orthogonal to its right eigenvector")));
        }
        let scale = s.conj().inv();
        for i in 0..r {
            w[(i, m)] *= scale;
        }
    }

    let modes = w.adjoint() * &b;
    let lambda = mu.iter().map(|m| m.ln() / lag).collect();
    Ok(KoopmanModel {
        k,
        b,
        mu,
        lambda,
        xi,
        w,
        modes,
        lag,
        ridge,
        degenerate,
    })
}

fn has_close_pair(mu: &[c64]) -> bool {
    for i in 0..mu.len() {
        for j in i + 1..mu.len() {
            let tol = 1e-8 * mu[i].norm().max(mu[j].norm()).max(1.0);
            if (mu[i] - mu[j]).norm() <= tol {
                return true;
            }
        }
    }
    false
}

fn adjoint_left_vectors(k: MatRef<'_, c64>, mu: &[c64]) -> Result<Mat<c64>> {
    let r = k.nrows();
    let kh = k.adjoint().to_owned();
    let evd = kh
        .eigen()
        .map_err(|e| FkmdError::Numerical(format!("adjoint eigendecomposition failed: {e:?}")))?;
    let nu: Vec<c64> = (0..r).map(|i| evd.S()[i].conj()).collect();
    let mut used = vec![false; r];
    let mut w = Mat::zeros(r, r);
    for (m, target) in mu.iter().enumerate() {
        let j = (0..r)
            .filter(|&j| !used[j])
            .min_by(|&a, &b| (nu[a] - target).norm().total_cmp(&(nu[b] - target).norm()))
            .ok_or_else(|| FkmdError::Numerical("could not pair left eigenvectors".into()))?;
        used[j] = true;
        for i in 0..r {
            w[(i, m)] = evd.U()[(i, j)];
        }
    }
    Ok(w)
}

/// Fit from dense feature matrices.
pub fn fit(psi_x: &FeatureMatrix, psi_y: &FeatureMatrix, g: MatRef<'_, f64>, ridge: Ridge, lag: f64) -> Result<KoopmanModel> {
    if psi_x.nrows() != psi_y.nrows() || psi_x.nrows() != g.nrows() {
        return Err(FkmdError::DimensionMismatch(format!(
            "Psi_x has {} rows, Psi_y {}, G {}",
            psi_x.nrows(),
            psi_y.nrows(),
            g.nrows()
        )));
    }
    if psi_x.ncols() != psi_y.ncols() {
        return Err(FkmdError::DimensionMismatch(format!(
            "Psi_x has {} features, Psi_y {}",
            psi_x.ncols(),
            psi_y.ncols()
        )));
    }
    let mut ne = NormalEquations::new(psi_x.ncols(), g.ncols());
    ne.accumulate(
        psi_x.to_complex().as_ref(),
        psi_y.to_complex().as_ref(),
        linalg::to_complex(g).as_ref(),
    )?;
    Ok(ne.solve(ridge, lag)?.0)
}

/// `‖ΨxK − Ψy‖_F / ‖Ψy‖_F` computed directly.
pub fn regression_residual(model: &KoopmanModel, psi_x: &FeatureMatrix, psi_y: &FeatureMatrix) -> f64 {
    let px = psi_x.to_complex();
    let py = psi_y.to_complex();
    let diff = &px * &model.k - &py;
    linalg::frobenius_c(diff.as_ref()) / linalg::frobenius_c(py.as_ref())
}

/// `Ψx K Ψx^†` for the ridge solution `K`, the `N × N` map that carries
/// observations at the inputs to their one-lag images. When `R ≥ N` it is
/// formed in the dual, `G (G + βI)⁻¹ (Ψy Ψx*) G⁻¹` with `G = Ψx Ψx*`, so `K`
/// itself is never built.
pub fn inference_matrix(psi_x: &FeatureMatrix, psi_y: &FeatureMatrix, ridge: f64) -> Result<Mat<c64>> {
    let (n, r) = (psi_x.nrows(), psi_x.ncols());
    if psi_y.nrows() != n || psi_y.ncols() != r {
        return Err(FkmdError::DimensionMismatch(format!(
            "Psi_x is {n}x{r}, Psi_y is {}x{}",
            psi_y.nrows(),
            psi_y.ncols()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(FkmdError::InvalidParameter(format!("ridge must be nonnegative, got {ridge}")));
    }
    let px = psi_x.to_complex();
    let py = psi_y.to_complex();
    let out = if r >= n {
        let gram = &px * px.adjoint();
        let cross = &py * px.adjoint();
        let mut shifted = gram.clone();
        for i in 0..n {
            shifted[(i, i)] += c64::new(ridge, 0.0);
        }
        // G (G+β)⁻¹ C G⁻¹ = G (G+β)⁻¹ (G⁻ᴴ Cᴴ)ᴴ, G Hermitian
        let right = gram.partial_piv_lu().solve(cross.adjoint().to_owned()).adjoint().to_owned();
        let middle = shifted.partial_piv_lu().solve(&right);
        &gram * middle
    } else {
        let mut a = px.adjoint() * &px;
        let pinv = a.partial_piv_lu().solve(px.adjoint().to_owned());
        for i in 0..r {
            a[(i, i)] += c64::new(ridge, 0.0);
        }
        let k = a.partial_piv_lu().solve(px.adjoint() * &py);
        &px * k * pinv
    };
    Ok(out)
}

/// Indices of modes passing `filter`, in ascending order. With `top_k`, the
/// highest `Re λ` win; ties go to the smaller `|Im λ|`, then the lower index.
pub fn apply_filter(model: &KoopmanModel, filter: &ModeFilter) -> Vec<usize> {
    select_modes(model.log_eigenvalues(), filter)
}

pub(crate) fn select_modes(lambda: &[c64], filter: &ModeFilter) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..lambda.len()).filter(|&m| filter.admits(lambda[m])).collect();
    if let Some(k) = filter.top_k {
        keep.sort_by(|&a, &b| {
            lambda[b]
                .re
                .total_cmp(&lambda[a].re)
                .then(lambda[a].im.abs().total_cmp(&lambda[b].im.abs()))
                .then(a.cmp(&b))
        });
        keep.truncate(k);
        keep.sort_unstable();
    }
    keep
}

/// `Ψ Ξ`: column m samples the eigenfunction `φ_m`.
pub fn eigenfunctions(model: &KoopmanModel, psi: &FeatureMatrix) -> Result<Mat<c64>> {
    if psi.ncols() != model.n_features() {
        return Err(FkmdError::DimensionMismatch(format!(
            "{} feature columns for a model with {} features",
            psi.ncols(),
            model.n_features()
        )));
    }
    Ok(psi.to_complex() * &model.xi)
}

/// Forecast of the observable, `steps × L`, real part.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub values: Mat<f64>,
    /// `max |Im| / (1 + |Re|)` over all entries before taking the real part.
    pub max_imag_residue: f64,
    pub retained_modes: Vec<usize>,
}

fn check_features(model: &KoopmanModel, features: &FeatureMap, x0: &[f64]) -> Result<()> {
    if features.n_features() != model.n_features() {
        return Err(FkmdError::DimensionMismatch(format!(
            "feature map has {} features, model {}",
            features.n_features(),
            model.n_features()
        )));
    }
    if x0.len() != features.dim() {
        return Err(FkmdError::DimensionMismatch(format!(
            "seed has dimension {}, features expect {}",
            x0.len(),
            features.dim()
        )));
    }
    Ok(())
}

fn retained(model: &KoopmanModel, filter: &ModeFilter) -> Result<Vec<usize>> {
    let sel = apply_filter(model, filter);
    if sel.is_empty() {
        Err(FkmdError::EmptyModeSet)
    } else {
        Ok(sel)
    }
}

fn divergence(model: &KoopmanModel, sel: &[usize]) -> FkmdError {
    let worst = sel
        .iter()
        .map(|&m| model.lambda[m])
        .max_by(|a, b| a.re.total_cmp(&b.re))
        .unwrap_or(c64::new(f64::NAN, f64::NAN));
    FkmdError::Divergence {
        re: worst.re,
        im: worst.im,
    }
}

/// Row k is `Σ_m μ_m^k φ_m(x0) v_m*` over the retained modes, with the
/// eigenfunctions evaluated once at the seed.
pub fn predict(model: &KoopmanModel, features: &FeatureMap, x0: &[f64], steps: usize, filter: &ModeFilter) -> Result<Forecast> {
    check_features(model, features, x0)?;
    let sel = retained(model, filter)?;
    let psi0 = features.feature_row(x0);
    let r = model.n_features();
    let l = model.n_outputs();
    let phi: Vec<c64> = sel
        .iter()
        .map(|&m| (0..r).map(|i| psi0[i] * model.xi[(i, m)]).sum())
        .collect();

    let mut power: Vec<c64> = vec![ONE; sel.len()];
    let mut values = Mat::zeros(steps, l);
    let mut residue: f64 = 0.0;
    for k in 0..steps {
        for (p, &m) in power.iter_mut().zip(&sel) {
            *p *= model.mu[m];
        }
        for j in 0..l {
            let mut acc = linalg::ZERO;
            for (s, &m) in sel.iter().enumerate() {
                acc += power[s] * phi[s] * model.modes[(m, j)];
            }
            if !acc.re.is_finite() || !acc.im.is_finite() {
                return Err(divergence(model, &sel));
            }
            residue = residue.max(acc.im.abs() / (1.0 + acc.re.abs()));
            values[(k, j)] = acc.re;
        }
    }
    Ok(Forecast {
        values,
        max_imag_residue: residue,
        retained_modes: sel,
    })
}

/// Step-by-step forecast: each step maps the previous predicted embedded
/// state through one lag of the retained spectral expansion. Requires the
/// observable to be the full embedded state.
pub fn predict_rollout(model: &KoopmanModel, features: &FeatureMap, x0: &[f64], steps: usize, filter: &ModeFilter) -> Result<Forecast> {
    check_features(model, features, x0)?;
    if model.n_outputs() != features.dim() {
        return Err(FkmdError::Unsupported(format!(
            "rollout needs the full-state observable (L = D = {}), model has L = {}",
            features.dim(),
            model.n_outputs()
        )));
    }
    let sel = retained(model, filter)?;
    let one_step = model.weighted_modes(&sel, |m| model.mu[m]);
    let l = model.n_outputs();
    let mut state = x0.to_vec();
    let mut values = Mat::zeros(steps, l);
    let mut residue: f64 = 0.0;
    for k in 0..steps {
        let psi = features.feature_row(&state);
        for j in 0..l {
            let acc: c64 = psi.iter().enumerate().map(|(i, p)| p * one_step[(i, j)]).sum();
            if !acc.re.is_finite() || !acc.im.is_finite() {
                return Err(divergence(model, &sel));
            }
            residue = residue.max(acc.im.abs() / (1.0 + acc.re.abs()));
            values[(k, j)] = acc.re;
            state[j] = acc.re;
        }
    }
    Ok(Forecast {
        values,
        max_imag_residue: residue,
        retained_modes: sel,
    })
}
