mod common;

use common::oracles::{fd_gradient_error, wavy_dataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrapped_lvm::kernels::{MultitaskKernel, Noise, SEKernel, TaskCovariance};
use wrapped_lvm::lvm::{
    dense_log_likelihood, log_marginal_likelihood, train_map, BackConstraintConfig, Dataset, LatentModel, MapObjective,
    ModelParts, TrainConfig,
};
use wrapped_lvm::manifolds::ManifoldSpec;

#[test]
fn map_gradient_matches_finite_differences() {
    let configs = [
        TrainConfig::default(),
        TrainConfig { gpdm: false, per_task_noise: true, task_rank: Some(1), ..TrainConfig::default() },
        TrainConfig { back_constraints: Some(BackConstraintConfig::default()), ..TrainConfig::default() },
    ];
    let specs = [
        ManifoldSpec::Spd { size: 2 },
        ManifoldSpec::Product { components: vec![ManifoldSpec::Euclidean { dim: 1 }, ManifoldSpec::Sphere { dim: 2 }] },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for spec in &specs {
        let ds = wavy_dataset(spec, 10, 3);
        for config in &configs {
            let (obj, p0) = MapObjective::new(&ds, config).unwrap();
            for _ in 0..3 {
                let p: Vec<f64> = p0.iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
                let err = fd_gradient_error(&obj, &p);
                assert!(err < 1e-4, "{spec:?} {config:?}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn kronecker_likelihood_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let n = 5 + trial;
        let m = 1 + trial % 3;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let v = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
        let noise = if trial % 2 == 0 {
            Noise::Shared(0.05)
        } else {
            Noise::PerTask((0..m).map(|i| 0.02 + 0.03 * i as f64).collect())
        };
        let kernel = MultitaskKernel {
            latent: SEKernel::new(0.7, 1.3).unwrap(),
            task: TaskCovariance::new(b, DVector::from_element(m, 0.2)).unwrap(),
            noise,
        };
        let spec = ManifoldSpec::Euclidean { dim: m };
        let model =
            LatentModel::from_parts(ModelParts::new(spec.clone(), x.clone(), v.clone(), kernel.clone())).unwrap();
        let ds = Dataset::new(spec, (0..n).map(|i| v.row(i).iter().copied().collect()).collect(), vec![0; n]).unwrap();
        let kron = log_marginal_likelihood(&model, &ds).unwrap();
        let dense = dense_log_likelihood(&kernel, &x, &v).unwrap();
        assert!((kron - dense).abs() < 1e-8, "{kron} vs {dense}");
    }
}

#[test]
fn short_training_improves_objective() {
    let spec = ManifoldSpec::Sphere { dim: 2 };
    let ds = wavy_dataset(&spec, 30, 5);
    let config = TrainConfig { iterations: 100, ..TrainConfig::default() };
    let model = train_map(&ds, &config).unwrap();
    let trace = model.objective_trace();
    assert_eq!(trace.len(), 101);
    assert!(trace[100] > trace[0]);
    let again = train_map(&ds, &config).unwrap();
    assert_eq!(again.objective_trace(), trace);
}
