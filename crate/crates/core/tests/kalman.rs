//! Filter and smoother against direct conditioning of the stacked Gaussian system.

mod common;

use approx::assert_abs_diff_eq;
use common::gaussian::{condition, random_instance, Instance};
use mstm::linalg::min_eigenvalue;
use mstm::sampler::{backward_sample, kalman_filter, rts_smoother, FilterOutput};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(inst: &Instance) -> FilterOutput {
    kalman_filter(&inst.z, &inst.s, &inst.m, &inst.k1, &inst.w, &inst.v).unwrap()
}

#[test]
fn filtered_moments_match_joint_gaussian() {
    let inst = random_instance(2, 3, 4, 11);
    let out = run(&inst);
    let r = 2;
    for t in 0..3 {
        let (mean, cov) = condition(&inst, t + 1);
        assert_abs_diff_eq!(out.filtered_mean[t], mean.rows(t * r, r).into_owned(), epsilon = 1e-8);
        assert_abs_diff_eq!(
            out.filtered_cov[t],
            cov.view((t * r, t * r), (r, r)).into_owned(),
            epsilon = 1e-8
        );
    }
}

#[test]
fn smoothed_moments_match_joint_gaussian() {
    for (r, horizon, seed) in [(2, 3, 5), (3, 4, 6), (1, 12, 7), (4, 3, 8)] {
        let inst = random_instance(r, horizon, 4, seed);
        let out = run(&inst);
        let (means, covs) = rts_smoother(&out, &inst.m).unwrap();
        let (mean, cov) = condition(&inst, horizon);
        for t in 0..horizon {
            assert_abs_diff_eq!(means[t], mean.rows(t * r, r).into_owned(), epsilon = 1e-8);
            assert_abs_diff_eq!(covs[t], cov.view((t * r, t * r), (r, r)).into_owned(), epsilon = 1e-8);
        }
    }
}

#[test]
fn covariances_stay_symmetric_psd() {
    let inst = random_instance(3, 4, 2, 21);
    let out = run(&inst);
    for p in out.filtered_cov.iter().chain(&out.predicted_cov) {
        assert_eq!(p, &p.transpose());
        assert!(min_eigenvalue(p) >= -1e-10);
    }
}

#[test]
fn filter_starts_from_scaled_prior() {
    let inst = random_instance(2, 2, 3, 4);
    let out = run(&inst);
    assert_abs_diff_eq!(out.predicted_cov[0], inst.k1, epsilon = 1e-12);
    assert_eq!(out.predicted_mean[0], DVector::zeros(2));
}

#[test]
fn backward_draws_match_smoother_scalar() {
    let inst = random_instance(1, 2, 3, 17);
    let out = run(&inst);
    let (mean, cov) = condition(&inst, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 50_000;
    let draws: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| backward_sample(&out, &inst.m, &inst.w, &mut rng, None).unwrap())
        .collect();
    let x = |j: usize, t: usize| draws[j][t][0];
    let avg = |t: usize| (0..n).map(|j| x(j, t)).sum::<f64>() / n as f64;
    let (m0, m1) = (avg(0), avg(1));
    let c = |a: usize, ma: f64, b: usize, mb: f64| {
        (0..n).map(|j| (x(j, a) - ma) * (x(j, b) - mb)).sum::<f64>() / (n - 1) as f64
    };
    for (t, mt) in [(0, m0), (1, m1)] {
        let var = cov[(t, t)];
        let se_mean = (var / n as f64).sqrt();
        assert!((mt - mean[t]).abs() < 3.0 * se_mean, "mean {t}: {mt} vs {}", mean[t]);
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        let emp = c(t, mt, t, mt);
        assert!((emp - var).abs() < 3.0 * se_var, "var {t}: {emp} vs {var}");
    }
    // Cross-covariance: se of the sample covariance is sqrt((σ00 σ11 + σ01²)/n).
    let se_cross = ((cov[(0, 0)] * cov[(1, 1)] + cov[(0, 1)].powi(2)) / n as f64).sqrt();
    let emp = c(0, m0, 1, m1);
    assert!(
        (emp - cov[(0, 1)]).abs() < 3.0 * se_cross,
        "cov {emp} vs {}",
        cov[(0, 1)]
    );
}

#[test]
fn singular_predicted_covariance_uses_pseudoinverse() {
    let counter = mstm::linalg::OpCounter::default();
    let r = 2;
    let s = vec![DMatrix::identity(r, r); 2];
    let z = vec![DVector::from_vec(vec![0.3, -0.1]); 2];
    let v = vec![DVector::from_element(r, 0.5); 2];
    let m = vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])];
    let w = vec![DMatrix::zeros(r, r)];
    let k1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let out = kalman_filter(&z, &s, &m, &k1, &w, &v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = backward_sample(&out, &m, &w, &mut rng, Some(&counter)).unwrap();
    assert!(draw.iter().all(|d| d.iter().all(|x| x.is_finite())));
    assert_eq!(counter.snapshot().pinv_fallbacks, 1);
}

#[test]
fn non_conformable_inputs_rejected() {
    let inst = random_instance(2, 2, 3, 1);
    let bad_s = vec![DMatrix::zeros(3, 3); 2];
    assert!(kalman_filter(&inst.z, &bad_s, &inst.m, &inst.k1, &inst.w, &inst.v).is_err());
    assert!(kalman_filter(&inst.z, &inst.s, &[], &inst.k1, &[], &inst.v).is_err());
}
