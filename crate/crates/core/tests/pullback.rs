mod common;

use common::oracles::monte_carlo_metric;
use common::{identity_task_model, random_latent, random_model, rel_frobenius, specs};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wrapped_lvm::pullback::{
    exp_jacobian, expected_pullback, expected_pullback_raw, jacobian_posterior, jacobian_posterior_dense,
    magnification, tangent_metric, Differentiation,
};

#[test]
fn matrix_normal_matches_dense_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, spec) in specs().iter().enumerate() {
        for n in [3, 12, 20] {
            let model = random_model(spec, n, 100 + k as u64 * 10 + n as u64);
            let xs = random_latent(&mut rng);
            let jp = jacobian_posterior(&model, &xs).unwrap();
            let dense = jacobian_posterior_dense(&model, &xs).unwrap();
            assert!((jp.vec_mean() - &dense.mean).amax() < 1e-10, "{spec:?} mean");
            assert!((jp.vec_cov() - &dense.cov).amax() < 1e-10, "{spec:?} cov");
        }
    }
}

#[test]
fn jacobian_mean_is_derivative_of_decoder_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for (k, spec) in specs().iter().enumerate() {
        let model = random_model(spec, 15, 200 + k as u64);
        for _ in 0..5 {
            let xs = random_latent(&mut rng);
            let jp = jacobian_posterior(&model, &xs).unwrap();
            for r in 0..2 {
                let mut a = xs.clone();
                let mut b = xs.clone();
                a[r] += h;
                b[r] -= h;
                let fd = (model.predict_mean(&a).unwrap() - model.predict_mean(&b).unwrap()) / (2.0 * h);
                for m in 0..fd.len() {
                    assert!((fd[m] - jp.mean[(r, m)]).abs() < 1e-4, "{spec:?}");
                }
            }
        }
    }
}

#[test]
fn analytic_exp_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, spec) in specs().iter().enumerate() {
        let model = random_model(spec, 10, 300 + k as u64);
        for _ in 0..10 {
            let xs = random_latent(&mut rng);
            let a = exp_jacobian(&model, &xs, Differentiation::Analytic).unwrap();
            let f = exp_jacobian(&model, &xs, Differentiation::FiniteDifference).unwrap();
            assert!((a - f).amax() < 1e-5, "{spec:?}");
        }
    }
}

#[test]
fn expected_metric_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..4 {
        let spec = &specs()[i % 3];
        let model = random_model(spec, 12, 400 + i as u64);
        let xs = random_latent(&mut rng);
        let jp = jacobian_posterior(&model, &xs).unwrap();
        let g = tangent_metric(&model, &xs).unwrap();
        let exact = expected_pullback_raw(&jp, &g);
        let mc = monte_carlo_metric(&jp.mean, &jp.row_cov, &jp.col_cov, &g, 20_000, i as u64);
        assert!(rel_frobenius(&mc, &exact) < 0.03, "{spec:?}");
    }
}

#[test]
fn identity_tasks_reduce_to_isotropic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, spec) in specs().iter().enumerate() {
        let model = identity_task_model(spec, 10, 500 + k as u64);
        let xs = random_latent(&mut rng);
        let jp = jacobian_posterior(&model, &xs).unwrap();
        let m = spec.intrinsic_dim();
        let raw = expected_pullback_raw(&jp, &DMatrix::identity(m, m));
        let tosi = &jp.mean * jp.mean.transpose() + &jp.row_cov * m as f64;
        assert!((raw - tosi).amax() < 1e-12);
    }
}

#[test]
fn expected_metric_is_symmetric_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, spec) in specs().iter().enumerate() {
        let model = random_model(spec, 15, 600 + k as u64);
        for _ in 0..250 {
            let xs = random_latent(&mut rng);
            let g = expected_pullback(&model, &xs).unwrap();
            assert!((&g - g.transpose()).amax() < 1e-10);
            let min = g.clone().symmetric_eigenvalues().min();
            assert!(min > 0.0, "{spec:?} min eigenvalue {min}");
            assert!(magnification(&model, &xs).unwrap() > 0.0);
        }
    }
}

#[test]
fn far_field_metric_is_prior_variance() {
    let spec = &specs()[0];
    let model = random_model(spec, 10, 700);
    let far = [40.0, -40.0];
    let jp = jacobian_posterior(&model, &far).unwrap();
    let k = &model.kernel().latent;
    let prior = k.variance / (k.lengthscale * k.lengthscale);
    assert!(jp.mean.amax() < 1e-12);
    assert!((&jp.row_cov - DMatrix::identity(2, 2) * prior).amax() < 1e-10);
}
