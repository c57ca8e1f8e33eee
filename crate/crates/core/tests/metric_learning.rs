use faer::{c64, Mat};
use fkmd_core::featurize::{FeatureMap, FeatureMatrix, FourierFeatures, KernelFeatures, MahalanobisMatrix};
use fkmd_core::koopman::{self, ModeFilter, ObservationMap, Ridge};
use fkmd_core::mahalanobis::{
    assemble_metric, block_norms, collect_j, compute_j_modal, curvature_constancy, pairwise_distance_std,
    regularize_metric, rescale_metric, JEstimate, JSource,
};
use fkmd_core::samples::RowMatrix;
use fkmd_core::FkmdError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> MahalanobisMatrix {
    let a = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = Mat::from_fn(d, d, |i, j| {
        scale * ((0..d).map(|k| a[(i, k)] * a[(j, k)]).sum::<f64>() / d as f64 + if i == j { 0.5 } else { 0.0 })
    });
    MahalanobisMatrix::new(m).unwrap()
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, d: usize, half: f64) -> RowMatrix {
    RowMatrix::new((0..n * d).map(|_| rng.random_range(-half..half)).collect(), d).unwrap()
}

/// Central differences of every feature, `D × R`.
fn fd_gradients(features: &FeatureMap, x: &[f64], step: f64) -> Mat<c64> {
    let d = x.len();
    let r = features.n_features();
    let mut out = Mat::zeros(d, r);
    for i in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += step;
        xm[i] -= step;
        let fp = features.feature_row(&xp);
        let fm = features.feature_row(&xm);
        for m in 0..r {
            out[(i, m)] = (fp[m] - fm[m]) / (2.0 * step);
        }
    }
    out
}

fn frob_diff(a: &Mat<c64>, b: &Mat<c64>) -> (f64, f64) {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            diff += (a[(i, j)] - b[(i, j)]).norm_sqr();
            norm += a[(i, j)].norm_sqr();
        }
    }
    (diff.sqrt(), norm.sqrt())
}

fn worst_gradient_error(features: &FeatureMap, points: &RowMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let x = &points.as_slice()[n * 3..n * 3 + 3];
        let analytic = features.feature_gradients(x).unwrap().to_complex();
        let fd = fd_gradients(features, x, 1e-5);
        let (diff, norm) = frob_diff(&analytic, &fd);
        worst = worst.max(diff / norm.max(1e-300));
    }
    worst
}

#[test]
fn kernel_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let metric = random_spd(&mut rng, 3, 1.0);
    let centers = uniform_points(&mut rng, 20, 3, 1.0);
    let features = FeatureMap::Kernel(KernelFeatures::new(centers, metric).unwrap());
    let points = uniform_points(&mut rng, 100, 3, 1.0);
    let err = worst_gradient_error(&features, &points);
    assert!(err <= 1e-5, "kernel gradient error {err}");
}

#[test]
fn fourier_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let metric = random_spd(&mut rng, 3, 1.0);
    let features = FeatureMap::Fourier(FourierFeatures::draw(metric, 20, 4, 1).unwrap());
    let points = uniform_points(&mut rng, 100, 3, 1.0);
    let err = worst_gradient_error(&features, &points);
    assert!(err <= 1e-5, "Fourier gradient error {err}");
}

fn random_j(rng: &mut ChaCha8Rng, n: usize, d: usize, l: usize, complex: bool) -> JEstimate {
    let values = (0..n)
        .map(|_| {
            Mat::from_fn(d, l, |_, _| {
                let im = if complex { rng.sample(StandardNormal) } else { 0.0 };
                c64::new(rng.sample(StandardNormal), im)
            })
        })
        .collect();
    JEstimate {
        values,
        source: JSource::Modal,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn curvature_is_constant_under_learned_metric(
        seed in any::<u64>(),
        d in 1usize..=20,
        l in 1usize..=4,
        extra in 0usize..=180,
        complex in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d + extra;
        let j = random_j(&mut rng, n, d, l, complex);
        let metric = assemble_metric(&j).unwrap();
        let dev = curvature_constancy(&j, &metric, 1.0, 100, seed).unwrap();
        prop_assert!(dev <= 1e-6, "deviation {dev}");
    }

    #[test]
    fn assembled_metric_is_psd_and_ridge_shifts_it(seed in any::<u64>(), d in 1usize..=8, n in 1usize..=6, delta in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = random_j(&mut rng, n, d, 1, true);
        let metric = assemble_metric(&j).unwrap();
        let reg = regularize_metric(&metric, delta).unwrap();
        let zero = vec![0.0; d];
        for _ in 0..20 {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let uu: f64 = u.iter().map(|v| v * v).sum();
            let q = metric.quad_form(&u, &zero);
            prop_assert!(q >= -1e-10 * uu * (1.0 + metric.matrix()[(0, 0)].abs()));
            prop_assert!((reg.quad_form(&u, &zero) - q - delta * uu).abs() <= 1e-9 * (1.0 + q + delta * uu));
        }
        prop_assert_eq!(reg.ridge_delta(), delta);
    }

    #[test]
    fn rescaled_metric_ignores_overall_scale(seed in any::<u64>(), c in 0.01f64..100.0, h in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = random_spd(&mut rng, 3, 1.0);
        let scaled = random_scaled(&metric, c);
        let points = uniform_points(&mut rng, 40, 3, 1.0);
        let s1 = pairwise_distance_std(&points, &metric).unwrap();
        let s2 = pairwise_distance_std(&points, &scaled).unwrap();
        prop_assert!((s2 - c.sqrt() * s1).abs() <= 1e-10 * s2);
        let a = rescale_metric(&metric, h, s1).unwrap();
        let b = rescale_metric(&scaled, h, s2).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                prop_assert!((a.matrix()[(i, k)] - b.matrix()[(i, k)]).abs() <= 1e-10 * (1.0 + a.matrix()[(i, k)].abs()));
            }
        }
        // unit spread after rescaling with h = 1
        let unit = rescale_metric(&metric, 1.0, s1).unwrap();
        prop_assert!((pairwise_distance_std(&points, &unit).unwrap() - 1.0).abs() <= 1e-10);
    }
}

fn random_scaled(metric: &MahalanobisMatrix, c: f64) -> MahalanobisMatrix {
    let m = metric.matrix();
    MahalanobisMatrix::new(Mat::from_fn(m.nrows(), m.ncols(), |i, j| c * m[(i, j)])).unwrap()
}

#[test]
fn constant_curvature_gives_its_outer_product() {
    let a = [[0.0, 1.0], [-1.0, 0.0]];
    let n = 500;
    let j = JEstimate {
        values: (0..n).map(|_| Mat::from_fn(2, 2, |i, k| c64::new(a[i][k], 0.0))).collect(),
        source: JSource::Modal,
    };
    let metric = assemble_metric(&j).unwrap();
    let mut err = 0.0;
    for i in 0..2 {
        for k in 0..2 {
            let aat: f64 = (0..2).map(|l| a[i][l] * a[k][l]).sum();
            err += (metric.matrix()[(i, k)] / n as f64 - aat).powi(2);
        }
    }
    assert!(err.sqrt() <= 1e-10);
}

#[test]
fn singular_metric_rejected_by_constancy() {
    let j = JEstimate {
        values: vec![Mat::from_fn(3, 1, |i, _| c64::new(i as f64, 0.0))],
        source: JSource::Modal,
    };
    let metric = assemble_metric(&j).unwrap();
    assert!(curvature_constancy(&j, &metric, 1.0, 10, 0).is_err());
}

/// Kernel model of the rotation `ẋ = xA` from scattered points.
fn rotation_model() -> (koopman::KoopmanModel, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tau: f64 = 0.05;
    let (s, c) = tau.sin_cos();
    let x = uniform_points(&mut rng, 300, 2, 1.0);
    let y: Vec<f64> = x
        .as_slice()
        .chunks(2)
        .flat_map(|p| [p[0] * c - p[1] * s, p[0] * s + p[1] * c])
        .collect();
    let y = RowMatrix::new(y, 2).unwrap();
    let sigma = pairwise_distance_std(&x, &MahalanobisMatrix::identity(2)).unwrap();
    let metric = rescale_metric(&MahalanobisMatrix::identity(2), 1.0, sigma).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(x.clone(), metric).unwrap());
    let psi_x = features.feature_matrix(&x).unwrap();
    let psi_y = features.feature_matrix(&y).unwrap();
    let g = x.to_mat();
    let model = koopman::fit(&psi_x, &psi_y, g.as_ref(), Ridge::Fixed(1e-10), tau).unwrap();
    (model, features)
}

#[test]
fn modal_curvature_matches_differentiated_velocity() {
    let (model, features) = rotation_model();
    let filter = ModeFilter {
        re_min: -1.0,
        im_max: 1.5,
        ..ModeFilter::all()
    };
    let sel = koopman::apply_filter(&model, &filter);
    assert!(!sel.is_empty());
    let velocity = |x: &[f64]| -> Vec<c64> {
        let psi = Mat::from_fn(1, features.n_features(), |_, r| features.feature_row(x)[r]);
        let phi = koopman::eigenfunctions(&model, &FeatureMatrix::Complex(psi)).unwrap();
        (0..model.n_outputs())
            .map(|l| sel.iter().map(|&m| model.log_eigenvalues()[m] * phi[(0, m)] * model.modes()[(m, l)]).sum())
            .collect()
    };
    let a = [[0.0, 1.0], [-1.0, 0.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let j = compute_j_modal(&model, &features, &x, &filter).unwrap();
        let step = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += step;
            xm[i] -= step;
            let (vp, vm) = (velocity(&xp), velocity(&xm));
            for l in 0..2 {
                let fd = (vp[l] - vm[l]) / (2.0 * step);
                assert!((j[(i, l)] - fd).norm() <= 1e-5 * (1.0 + fd.norm()), "J {} vs {}", j[(i, l)], fd);
                // the velocity field xA has constant gradient A
                assert!((j[(i, l)].re - a[i][l]).abs() <= 3e-2, "J[{i},{l}] = {}", j[(i, l)]);
            }
        }
    }
}

#[test]
fn single_feature_curvature_is_rate_times_gradient() {
    let center = RowMatrix::from_rows(&[[0.3, -0.2]]).unwrap();
    let features = FeatureMap::Kernel(KernelFeatures::new(center, MahalanobisMatrix::identity(2)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = uniform_points(&mut rng, 30, 2, 1.0);
    let y = RowMatrix::new(x.as_slice().iter().map(|v| 0.8 * v).collect(), 2).unwrap();
    let psi_x = features.feature_matrix(&x).unwrap();
    let psi_y = features.feature_matrix(&y).unwrap();
    let model = koopman::fit(&psi_x, &psi_y, x.to_mat().as_ref(), Ridge::Auto, 0.1).unwrap();
    let lambda = model.log_eigenvalues()[0];
    let b = model.observable_coefficients();
    let point = [0.1, 0.4];
    let j = compute_j_modal(&model, &features, &point, &ModeFilter::all()).unwrap();
    let grad = fd_gradients(&features, &point, 1e-6);
    for i in 0..2 {
        for l in 0..2 {
            let expected = lambda * grad[(i, 0)] * b[(0, l)];
            assert!((j[(i, l)] - expected).norm() <= 1e-8 * (1.0 + expected.norm()));
        }
    }
}

#[test]
fn curvature_sources_and_their_shapes() {
    let (model, features) = rotation_model();
    let pts = RowMatrix::from_rows(&[[0.1, 0.2], [-0.3, 0.05]]).unwrap();
    let filter = ModeFilter::top(10);
    for source in [JSource::Modal, JSource::FiniteDifference] {
        let j = collect_j(&model, &features, &pts, source, &filter).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!((j.values[0].nrows(), j.values[0].ncols()), (2, 2));
    }
    let full = collect_j(&model, &features, &pts, JSource::FullState, &filter).unwrap();
    assert_eq!((full.values[0].nrows(), full.values[0].ncols()), (2, 1));

    // one observed coordinate cannot describe the full-state velocity
    let x = RowMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
    let f = FeatureMap::Kernel(KernelFeatures::new(x.clone(), MahalanobisMatrix::identity(2)).unwrap());
    let psi = f.feature_matrix(&x).unwrap();
    let obs = ObservationMap::Indices(vec![0]);
    let g = Mat::from_fn(4, 1, |i, _| obs.apply(&x.as_slice()[2 * i..2 * i + 2])[0]);
    let m = koopman::fit(&psi, &psi, g.as_ref(), Ridge::Auto, 1.0).unwrap();
    assert!(matches!(
        collect_j(&m, &f, &x, JSource::FullState, &ModeFilter::all()),
        Err(FkmdError::Unsupported(_))
    ));
}

#[test]
fn block_norms_group_by_channel_and_delay() {
    // two channels, two delays: coordinates (c0,d0) (c1,d0) (c0,d1) (c1,d1)
    let m = Mat::from_fn(4, 4, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
    let blocks = block_norms(m.as_ref(), 2).unwrap();
    assert!((blocks.channel[0][0] - (1.0f64 + 9.0).sqrt()).abs() < 1e-12);
    assert!((blocks.channel[1][1] - (4.0f64 + 16.0).sqrt()).abs() < 1e-12);
    assert_eq!(blocks.channel[0][1], 0.0);
    assert!((blocks.delay[0][0] - (1.0f64 + 4.0).sqrt()).abs() < 1e-12);
    assert!((blocks.delay[1][1] - (9.0f64 + 16.0).sqrt()).abs() < 1e-12);
    assert!(block_norms(m.as_ref(), 3).is_err());
}
