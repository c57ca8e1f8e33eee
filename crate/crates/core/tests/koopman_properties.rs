use faer::{c64, Mat};
use fkmd_core::featurize::{FeatureMap, FeatureMatrix, KernelFeatures, MahalanobisMatrix};
use fkmd_core::koopman::{self, KoopmanModel, ModeFilter, Ridge};
use fkmd_core::samples::RowMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn frob(m: &Mat<c64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

/// Gauss-Jordan elimination with partial pivoting on a dense real system.
fn dense_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Vec<Vec<f64>> = (0..n).map(|i| a[i].iter().chain(&b[i]).copied().collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs())).unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let f = aug[row][col];
                if f != 0.0 {
                    for k in 0..n + m {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn normal_oracle(px: &Mat<f64>, py: &Mat<f64>, ridge: f64) -> Vec<Vec<f64>> {
    let (n, r) = (px.nrows(), px.ncols());
    let a: Vec<Vec<f64>> = (0..r)
        .map(|i| {
            (0..r)
                .map(|j| (0..n).map(|k| px[(k, i)] * px[(k, j)]).sum::<f64>() + if i == j { ridge } else { 0.0 })
                .collect()
        })
        .collect();
    let b: Vec<Vec<f64>> = (0..r)
        .map(|i| (0..py.ncols()).map(|j| (0..n).map(|k| px[(k, i)] * py[(k, j)]).sum()).collect())
        .collect();
    dense_solve(&a, &b)
}

#[test]
fn koopman_matrix_matches_dense_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = gaussian(&mut rng, 20, 5);
    let py = gaussian(&mut rng, 20, 5);
    let g = gaussian(&mut rng, 20, 2);
    let model = koopman::fit(
        &FeatureMatrix::Real(px.clone()),
        &FeatureMatrix::Real(py.clone()),
        g.as_ref(),
        Ridge::Fixed(1e-8),
        1.0,
    )
    .unwrap();
    let oracle = normal_oracle(&px, &py, 1e-8);
    let k = model.koopman_matrix();
    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            diff += (k[(i, j)] - c64::new(oracle[i][j], 0.0)).norm_sqr();
            norm += oracle[i][j] * oracle[i][j];
        }
    }
    assert!((diff / norm).sqrt() < 1e-8);
    let b_oracle = normal_oracle(&px, &g, 1e-8);
    for i in 0..5 {
        for j in 0..2 {
            assert!((model.observable_coefficients()[(i, j)].re - b_oracle[i][j]).abs() < 1e-8 * (1.0 + b_oracle[i][j].abs()));
        }
    }
}

fn spectral_checks(model: &KoopmanModel, px: &Mat<c64>, py: &Mat<c64>, ridge: f64) {
    let r = model.n_features();
    let k = model.koopman_matrix().to_owned();
    let knorm = frob(&k);

    // normal equations
    let mut a = px.adjoint() * px;
    for i in 0..r {
        a[(i, i)] += c64::new(ridge, 0.0);
    }
    let rhs = px.adjoint() * py;
    let res = &a * &k - &rhs;
    assert!(frob(&res) <= 1e-8 * frob(&rhs), "normal residual {}", frob(&res) / frob(&rhs));

    // eigenpairs
    let xi = model.right_eigenvectors().to_owned();
    let mu = model.eigenvalues();
    let d = Mat::from_fn(r, r, |i, j| if i == j { mu[i] } else { c64::new(0.0, 0.0) });
    let eig_res = &k * &xi - &xi * &d;
    assert!(frob(&eig_res) <= 1e-8 * (1.0 + knorm), "eigen residual {}", frob(&eig_res));

    // biorthogonality
    let w = model.left_eigenvectors().to_owned();
    for m in 0..r {
        let s: c64 = (0..r).map(|i| w[(i, m)].conj() * xi[(i, m)]).sum();
        assert!((s - c64::new(1.0, 0.0)).norm() <= 1e-10, "w*xi = {s}");
    }

    // reconstruction
    if !model.is_degenerate() {
        let recon = &xi * &d * w.adjoint();
        let err = frob(&(&recon - &k));
        assert!(err <= 1e-6 * (1.0 + knorm), "reconstruction {err}");
    }

    // modes are W* B
    let v = w.adjoint() * model.observable_coefficients();
    assert!(frob(&(&v - model.modes())) <= 1e-12 * (1.0 + frob(&v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn random_real_systems(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = gaussian(&mut rng, 80, 50);
        let py = gaussian(&mut rng, 80, 50);
        let g = gaussian(&mut rng, 80, 3);
        let model = koopman::fit(
            &FeatureMatrix::Real(px.clone()),
            &FeatureMatrix::Real(py.clone()),
            g.as_ref(),
            Ridge::Fixed(1e-8),
            0.1,
        ).unwrap();
        let to_c = |m: &Mat<f64>| Mat::from_fn(m.nrows(), m.ncols(), |i, j| c64::new(m[(i, j)], 0.0));
        spectral_checks(&model, &to_c(&px), &to_c(&py), 1e-8);

        // real features: eigenvalues come in conjugate pairs
        let mu = model.eigenvalues();
        for a in mu {
            let partner = mu.iter().map(|b| (b - a.conj()).norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(partner <= 1e-10 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn random_complex_systems(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cplx = |rows: usize, cols: usize| {
            let re = gaussian(&mut rng, rows, cols);
            let im = gaussian(&mut rng, rows, cols);
            Mat::from_fn(rows, cols, |i, j| c64::new(re[(i, j)], im[(i, j)]))
        };
        let px = cplx(70, 50);
        let py = cplx(70, 50);
        let g = gaussian(&mut rng, 70, 2);
        let model = koopman::fit(
            &FeatureMatrix::Complex(px.clone()),
            &FeatureMatrix::Complex(py.clone()),
            g.as_ref(),
            Ridge::Fixed(1e-8),
            0.1,
        ).unwrap();
        spectral_checks(&model, &px, &py, 1e-8);
    }

    #[test]
    fn lambda_is_principal_log(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = gaussian(&mut rng, 30, 8);
        let py = gaussian(&mut rng, 30, 8);
        let g = gaussian(&mut rng, 30, 1);
        let tau = 0.05;
        let model = koopman::fit(&FeatureMatrix::Real(px), &FeatureMatrix::Real(py), g.as_ref(), Ridge::Auto, tau).unwrap();
        for (m, l) in model.eigenvalues().iter().zip(model.log_eigenvalues()) {
            prop_assert!(l.im.abs() <= std::f64::consts::PI / tau + 1e-9);
            prop_assert!(((l * tau).exp() - m).norm() <= 1e-12 * (1.0 + m.norm()));
        }
    }
}

#[test]
fn predict_output_is_real_for_real_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = RowMatrix::new((0..80).map(|_| rng.random_range(-1.0..1.0)).collect(), 2).unwrap();
    let metric = MahalanobisMatrix::new(Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 0.0 })).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(centers.clone(), metric).unwrap());
    let psi = features.feature_matrix(&centers).unwrap();
    let shifted: Vec<f64> = centers.as_slice().iter().map(|v| v * 0.9 + 0.05).collect();
    let psi_y = features.feature_matrix(&RowMatrix::new(shifted.clone(), 2).unwrap()).unwrap();
    let g = Mat::from_fn(40, 2, |i, j| centers.as_slice()[2 * i + j]);
    let model = koopman::fit(&psi, &psi_y, g.as_ref(), Ridge::Auto, 1.0).unwrap();
    let f = koopman::predict(&model, &features, &[0.2, -0.3], 10, &ModeFilter::all()).unwrap();
    assert!(f.max_imag_residue <= 1e-6, "{}", f.max_imag_residue);
}

#[test]
fn kernel_training_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 60;
    let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
    let metric = MahalanobisMatrix::new(Mat::from_fn(2, 2, |i, j| if i == j { 50.0 } else { 0.0 })).unwrap();
    let centers = RowMatrix::new(x.clone(), 2).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(centers.clone(), metric).unwrap());
    let psi_x = features.feature_matrix(&centers).unwrap();
    let psi_y = features.feature_matrix(&RowMatrix::new(y, 2).unwrap()).unwrap();
    let g = Mat::from_fn(n, 1, |i, _| x[2 * i]);
    let model = koopman::fit(&psi_x, &psi_y, g.as_ref(), Ridge::Fixed(0.0), 1.0).unwrap();
    assert!(koopman::regression_residual(&model, &psi_x, &psi_y) <= 1e-6);
}

#[test]
fn identity_dynamics_forecast_is_stationary() {
    let centers = RowMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.5], [-0.5, 1.0], [0.3, -0.8]]).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(centers.clone(), MahalanobisMatrix::identity(2)).unwrap());
    let psi = features.feature_matrix(&centers).unwrap();
    let g = Mat::from_fn(4, 2, |i, j| centers.as_slice()[2 * i + j]);
    let model = koopman::fit(&psi, &psi, g.as_ref(), Ridge::Fixed(0.0), 1.0).unwrap();
    let x0 = [1.0, 0.5];
    let row = features.feature_row(&x0);
    let b = model.observable_coefficients();
    let expected: Vec<f64> = (0..2).map(|l| (0..4).map(|r| row[r] * b[(r, l)]).sum::<c64>().re).collect();
    let f = koopman::predict(&model, &features, &x0, 4, &ModeFilter::all()).unwrap();
    for k in 0..4 {
        for l in 0..2 {
            assert!((f.values[(k, l)] - expected[l]).abs() < 1e-10);
            // a center's own feature row reproduces its observation
            assert!((f.values[(k, l)] - x0[l]).abs() < 1e-10);
        }
    }
}

#[test]
fn eigenfunctions_match_loop_and_biorthogonality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let px = gaussian(&mut rng, 25, 6);
    let py = gaussian(&mut rng, 25, 6);
    let g = gaussian(&mut rng, 25, 1);
    let model = koopman::fit(&FeatureMatrix::Real(px.clone()), &FeatureMatrix::Real(py), g.as_ref(), Ridge::Auto, 1.0).unwrap();
    let phi = koopman::eigenfunctions(&model, &FeatureMatrix::Real(px.clone())).unwrap();
    let xi = model.right_eigenvectors();
    for n in 0..25 {
        for m in 0..6 {
            let brute: c64 = (0..6).map(|r| c64::new(px[(n, r)], 0.0) * xi[(r, m)]).sum();
            assert!((phi[(n, m)] - brute).norm() < 1e-12 * (1.0 + brute.norm()));
        }
    }
    let w = model.left_eigenvectors();
    for j in 0..6 {
        let row = Mat::from_fn(1, 6, |_, r| w[(r, j)].conj());
        let out = koopman::eigenfunctions(&model, &FeatureMatrix::Complex(row)).unwrap();
        for m in 0..6 {
            let expected = if m == j { 1.0 } else { 0.0 };
            assert!((out[(0, m)] - c64::new(expected, 0.0)).norm() < 1e-10);
        }
    }
}

#[test]
fn rollout_of_identity_model_fixes_centers() {
    let centers = RowMatrix::from_rows(&[[0.0], [1.0], [2.5]]).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(centers.clone(), MahalanobisMatrix::identity(1)).unwrap());
    let psi = features.feature_matrix(&centers).unwrap();
    let g = Mat::from_fn(3, 1, |i, _| centers.as_slice()[i]);
    let model = koopman::fit(&psi, &psi, g.as_ref(), Ridge::Fixed(0.0), 1.0).unwrap();
    // a training center maps to itself, so rollout stays there
    let f = koopman::predict_rollout(&model, &features, &[1.0], 5, &ModeFilter::all()).unwrap();
    for k in 0..5 {
        assert!((f.values[(k, 0)] - 1.0).abs() < 1e-9);
    }
}
