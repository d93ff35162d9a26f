#![allow(dead_code)]

pub mod laws;
pub mod oracles;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrapped_lvm::kernels::{MultitaskKernel, Noise, SEKernel, TaskCovariance};
use wrapped_lvm::lvm::{LatentModel, ModelParts};
use wrapped_lvm::manifolds::ManifoldSpec;

pub fn specs() -> Vec<ManifoldSpec> {
    vec![
        ManifoldSpec::Sphere { dim: 2 },
        ManifoldSpec::Spd { size: 2 },
        ManifoldSpec::Product { components: vec![ManifoldSpec::Euclidean { dim: 1 }, ManifoldSpec::Sphere { dim: 2 }] },
        ManifoldSpec::Euclidean { dim: 3 },
    ]
}

/// A model with random latent points, tangent targets and hyperparameters.
pub fn random_model(spec: &ManifoldSpec, n: usize, seed: u64) -> LatentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.intrinsic_dim();
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
    let v = DMatrix::from_fn(n, m, |_, _| rng.random_range(-0.6..0.6));
    let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.7..0.7));
    let kernel = MultitaskKernel {
        latent: SEKernel::new(rng.random_range(0.4..1.0), rng.random_range(0.5..1.5)).unwrap(),
        task: TaskCovariance::new(b, DVector::from_fn(m, |_, _| rng.random_range(0.1..0.4))).unwrap(),
        noise: Noise::Shared(rng.random_range(0.01..0.05)),
    };
    LatentModel::from_parts(ModelParts::new(spec.clone(), x, v, kernel)).unwrap()
}

/// Same as [`random_model`] with an identity task covariance.
pub fn identity_task_model(spec: &ManifoldSpec, n: usize, seed: u64) -> LatentModel {
    let mut parts = random_model(spec, n, seed).parts().clone();
    parts.kernel.task = TaskCovariance::identity(spec.intrinsic_dim());
    LatentModel::from_parts(parts).unwrap()
}

pub fn random_latent(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
