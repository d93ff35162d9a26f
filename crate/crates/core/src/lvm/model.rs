//! Trained model state, posterior prediction and serialization.

use std::ops::Range;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::kron::KronSystem;
use super::objective::{change_of_volume, gaussian_terms, log_prior, ObjectiveTerms};
use super::train::tangent_targets;
use super::{Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::{MultitaskKernel, Noise, RiemannianBCKernel, SEKernel, TaskCovariance};
use crate::linalg::{cholesky, symmetrize};
use crate::manifolds::{ManifoldPoint, ManifoldSpec, POINT_TOL};

/// GPDM dynamics kernel hyperparameters and its fixed noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub theta: f64,
    pub sigma2: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackConstraintState {
    pub kernel: RiemannianBCKernel,
    /// `Q × N` weights.
    pub weights: DMatrix<f64>,
}

/// Serialized kernel hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub theta: f64,
    pub sigma2: f64,
    #[serde(rename = "task_B")]
    pub task_b: Vec<Vec<f64>>,
    pub task_v: Vec<f64>,
    pub noise: Noise,
}

impl Hyperparameters {
    pub fn from_kernel(k: &MultitaskKernel) -> Self {
        Self {
            theta: k.latent.lengthscale,
            sigma2: k.latent.variance,
            task_b: rows(&k.task.b),
            task_v: k.task.v.iter().copied().collect(),
            noise: k.noise.clone(),
        }
    }

    pub fn to_kernel(&self) -> Result<MultitaskKernel> {
        let m = self.task_v.len();
        let b = from_rows(&self.task_b, m, self.task_b.first().map_or(0, |r| r.len()))?;
        let kernel = MultitaskKernel {
            latent: SEKernel::new(self.theta, self.sigma2)?,
            task: TaskCovariance::new(b, DVector::from_column_slice(&self.task_v))?,
            noise: self.noise.clone(),
        };
        kernel.noise.validate(m)?;
        Ok(kernel)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(Error::Dimension(format!("expected a {nrows}×{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

/// Everything that defines a model; the factorization cache is derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    pub spec: ManifoldSpec,
    /// `N × Q` latent variables.
    pub latent: DMatrix<f64>,
    /// `N × M` centered tangent targets.
    pub targets: DMatrix<f64>,
    pub kernel: MultitaskKernel,
    pub basepoint: Vec<f64>,
    pub tangent_mean: DVector<f64>,
    pub dynamics: Option<DynamicsParams>,
    pub back_constraints: Option<BackConstraintState>,
    pub config: TrainConfig,
    pub objective_trace: Vec<f64>,
    pub trajectory_ids: Vec<usize>,
}

impl ModelParts {
    /// Parts with the default basepoint, zero tangent mean, one trajectory and no priors.
    pub fn new(spec: ManifoldSpec, latent: DMatrix<f64>, targets: DMatrix<f64>, kernel: MultitaskKernel) -> Self {
        let n = latent.nrows();
        let m = spec.intrinsic_dim();
        Self {
            basepoint: spec.default_basepoint(),
            tangent_mean: DVector::zeros(m),
            spec,
            config: TrainConfig { latent_dim: latent.ncols(), gpdm: false, ..TrainConfig::default() },
            latent,
            targets,
            kernel,
            dynamics: None,
            back_constraints: None,
            objective_trace: Vec::new(),
            trajectory_ids: vec![0; n],
        }
    }
}

#[derive(Clone, Debug)]
struct Cache {
    kf: DMatrix<f64>,
    kx: DMatrix<f64>,
    system: KronSystem,
    alpha: DMatrix<f64>,
    kx_chol: Cholesky<f64, Dyn>,
}

/// Posterior of the tangent coefficients at one latent point.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// A trained (wrapped) GPLVM. Immutable; prediction is safe from many threads.
#[derive(Clone, Debug)]
pub struct LatentModel {
    parts: ModelParts,
    cache: Cache,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackConstraintFile {
    kernel: RiemannianBCKernel,
    #[serde(rename = "W")]
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    spec: ManifoldSpec,
    #[serde(rename = "Q")]
    latent_dim: usize,
    #[serde(rename = "X")]
    latent: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    back_constraints: Option<BackConstraintFile>,
    targets: Vec<Vec<f64>>,
    hyperparameters: Hyperparameters,
    basepoint: ManifoldPoint,
    tangent_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dynamics: Option<DynamicsParams>,
    config: TrainConfig,
    objective_trace: Vec<f64>,
    trajectory_ids: Vec<usize>,
}

impl LatentModel {
    pub fn from_parts(parts: ModelParts) -> Result<Self> {
        let (n, q) = (parts.latent.nrows(), parts.latent.ncols());
        let m = parts.spec.intrinsic_dim();
        parts.spec.validate()?;
        if n == 0 || q == 0 {
            return Err(Error::Validation("model needs at least one latent point and dimension".into()));
        }
        if parts.targets.nrows() != n || parts.targets.ncols() != m {
            return Err(Error::Dimension(format!(
                "targets are {}×{}, expected {n}×{m}",
                parts.targets.nrows(),
                parts.targets.ncols()
            )));
        }
        if parts.kernel.tasks() != m || parts.tangent_mean.len() != m {
            return Err(Error::Dimension(format!("kernel and tangent mean must have {m} tasks")));
        }
        if parts.trajectory_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} trajectory ids for {n} latent points",
                parts.trajectory_ids.len()
            )));
        }
        if parts.latent.iter().chain(parts.targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent variables and targets must be finite".into()));
        }
        parts.kernel.noise.validate(m)?;
        parts.spec.check_point(&parts.basepoint, POINT_TOL)?;
        if let Some(bc) = &parts.back_constraints {
            if bc.weights.nrows() != q || bc.weights.ncols() != n {
                return Err(Error::Dimension(format!("back-constraint weights must be {q}×{n}")));
            }
        }
        let kf = parts.kernel.task.matrix();
        let kx = parts.kernel.latent.gram_jittered(&parts.latent)?;
        let noise = parts.kernel.noise.per_task(m);
        let system = KronSystem::new(&kf, &kx, &noise)?;
        let alpha = system.solve(&parts.targets);
        let kx_chol = cholesky(&kx, "latent Gram matrix")?;
        Ok(Self { parts, cache: Cache { kf, kx, system, alpha, kx_chol } })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.parts.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.parts.latent.ncols()
    }

    pub fn len(&self) -> usize {
        self.parts.latent.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent(&self) -> &DMatrix<f64> {
        &self.parts.latent
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.parts.targets
    }

    pub fn kernel(&self) -> &MultitaskKernel {
        &self.parts.kernel
    }

    pub fn basepoint(&self) -> ManifoldPoint {
        ManifoldPoint { spec: self.parts.spec.clone(), coords: self.parts.basepoint.clone() }
    }

    pub fn tangent_mean(&self) -> &DVector<f64> {
        &self.parts.tangent_mean
    }

    pub fn dynamics(&self) -> Option<&DynamicsParams> {
        self.parts.dynamics.as_ref()
    }

    pub fn back_constraints(&self) -> Option<&BackConstraintState> {
        self.parts.back_constraints.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.parts.config
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.parts.objective_trace
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.parts.objective_trace.last().copied()
    }

    pub fn trajectory_ids(&self) -> &[usize] {
        &self.parts.trajectory_ids
    }

    pub fn trajectories(&self) -> Vec<Range<usize>> {
        let ids = &self.parts.trajectory_ids;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=ids.len() {
            if i == ids.len() || ids[i] != ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Task covariance `k^f`.
    pub fn kf(&self) -> &DMatrix<f64> {
        &self.cache.kf
    }

    /// Jittered latent Gram matrix `K^x`.
    pub fn kx(&self) -> &DMatrix<f64> {
        &self.cache.kx
    }

    pub fn kx_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.cache.kx_chol
    }

    pub fn kron_system(&self) -> &KronSystem {
        &self.cache.system
    }

    /// `K⁻¹ vec(V)` arranged as an `N × M` matrix.
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.cache.alpha
    }

    fn check_query(&self, xs: &[f64]) -> Result<()> {
        if xs.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent query has {} coordinates, model has {}",
                xs.len(),
                self.latent_dim()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent query must be finite".into()));
        }
        Ok(())
    }

    /// Posterior mean of the tangent coefficients, tangent mean included.
    pub fn predict_mean(&self, xs: &[f64]) -> Result<DVector<f64>> {
        self.check_query(xs)?;
        let k = self.parts.kernel.latent.cross(&self.parts.latent, xs);
        Ok((k.transpose() * &self.cache.alpha * &self.cache.kf).transpose() + &self.parts.tangent_mean)
    }

    pub fn predict(&self, xs: &[f64]) -> Result<Posterior> {
        self.check_query(xs)?;
        let k = self.parts.kernel.latent.cross(&self.parts.latent, xs);
        let mean = (k.transpose() * &self.cache.alpha * &self.cache.kf).transpose() + &self.parts.tangent_mean;
        let sys = &self.cache.system;
        let m = sys.tasks();
        // (k^f ⊗ k*ᵀ) K⁻¹ (k^f ⊗ k*) = Σ_p λ̂_p² (Dû_p)(Dû_p)ᵀ Σ_q (u_qᵀk*)² / (λ̂_pλ_q + c)
        let proj = sys.latent_vecs.transpose() * &k;
        let mut cov = &self.cache.kf * self.parts.kernel.latent.variance;
        for p in 0..m {
            let s: f64 = (0..proj.len()).map(|q| proj[q] * proj[q] * sys.inv_spectrum[(q, p)]).sum();
            let du = DVector::from_fn(m, |i, _| sys.d[i] * sys.task_vecs[(i, p)]);
            cov -= &du * du.transpose() * (sys.task_vals[p] * sys.task_vals[p] * s);
        }
        Ok(Posterior { mean, covariance: symmetrize(&cov) })
    }

    /// Ambient coordinates of `Exp_b(f̂(x*))`.
    pub fn decode_coords(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mean = self.predict_mean(xs)?;
        self.parts.spec.exp(&self.parts.basepoint, mean.as_slice())
    }

    pub fn decode(&self, xs: &[f64]) -> Result<ManifoldPoint> {
        Ok(ManifoldPoint { spec: self.parts.spec.clone(), coords: self.decode_coords(xs)? })
    }

    /// Likelihood terms of `dataset` under this model's latent variables and hyperparameters.
    pub fn likelihood_terms(&self, dataset: &Dataset) -> Result<ObjectiveTerms> {
        if dataset.spec != self.parts.spec {
            return Err(Error::Dimension("dataset spec differs from the model spec".into()));
        }
        if dataset.len() != self.len() {
            return Err(Error::Dimension(format!("dataset has {} points, model has {}", dataset.len(), self.len())));
        }
        let raw = tangent_targets(dataset, &self.parts.basepoint)?;
        let mean = &self.parts.tangent_mean;
        let v = DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, j| raw[(i, j)] - mean[j]);
        let noise = self.parts.kernel.noise.per_task(self.parts.spec.intrinsic_dim());
        let g = gaussian_terms(&self.cache.kf, &self.cache.kx, &noise, &v, false)?;
        Ok(ObjectiveTerms {
            log_likelihood: g.value,
            change_of_volume: change_of_volume(&self.parts.spec, &self.parts.basepoint, &raw)?,
            log_prior: log_prior(self)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let p = &self.parts;
        let file = ModelFile {
            spec: p.spec.clone(),
            latent_dim: self.latent_dim(),
            latent: rows(&p.latent),
            back_constraints: p
                .back_constraints
                .as_ref()
                .map(|bc| BackConstraintFile { kernel: bc.kernel.clone(), weights: rows(&bc.weights) }),
            targets: rows(&p.targets),
            hyperparameters: Hyperparameters::from_kernel(&p.kernel),
            basepoint: self.basepoint(),
            tangent_mean: p.tangent_mean.iter().copied().collect(),
            dynamics: p.dynamics,
            config: p.config.clone(),
            objective_trace: p.objective_trace.clone(),
            trajectory_ids: p.trajectory_ids.clone(),
        };
        crate::io::to_json(&file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.basepoint.spec != f.spec {
            return Err(Error::Validation("basepoint spec differs from the model spec".into()));
        }
        let n = f.latent.len();
        let m = f.spec.intrinsic_dim();
        let back_constraints = match f.back_constraints {
            Some(bc) => {
                Some(BackConstraintState { weights: from_rows(&bc.weights, f.latent_dim, n)?, kernel: bc.kernel })
            }
            None => None,
        };
        Self::from_parts(ModelParts {
            latent: from_rows(&f.latent, n, f.latent_dim)?,
            targets: from_rows(&f.targets, n, m)?,
            kernel: f.hyperparameters.to_kernel()?,
            basepoint: f.basepoint.coords,
            tangent_mean: DVector::from_vec(f.tangent_mean),
            spec: f.spec,
            dynamics: f.dynamics,
            back_constraints,
            config: f.config,
            objective_trace: f.objective_trace,
            trajectory_ids: f.trajectory_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(noise: f64) -> LatentModel {
        let spec = ManifoldSpec::Sphere { dim: 2 };
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.2, -0.5, 0.8, 0.3, -1.1]);
        let v = DMatrix::from_row_slice(4, 2, &[0.1, -0.2, 0.3, 0.05, -0.25, 0.2, -0.15, -0.05]);
        let kernel = MultitaskKernel {
            latent: SEKernel::new(0.9, 1.2).unwrap(),
            task: TaskCovariance::new(DMatrix::from_row_slice(2, 1, &[0.3, 0.1]), DVector::from_vec(vec![0.2, 0.3]))
                .unwrap(),
            noise: Noise::Shared(noise),
        };
        LatentModel::from_parts(ModelParts::new(spec, x, v, kernel)).unwrap()
    }

    #[test]
    fn interpolates_without_noise() {
        let model = small_model(0.0);
        let mean = model.predict_mean(&[1.0, 0.2]).unwrap();
        assert!((mean[0] - 0.3).abs() < 1e-6 && (mean[1] - 0.05).abs() < 1e-6);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let model = small_model(0.01);
        let post = model.predict(&[40.0, -40.0]).unwrap();
        let prior = model.kf() * model.kernel().latent.variance;
        assert!((post.covariance - prior).abs().max() < 1e-6);
        assert!(post.mean.norm() < 1e-12);
    }

    #[test]
    fn decode_stays_on_sphere() {
        let model = small_model(0.01);
        let p = model.decode(&[0.4, 0.4]).unwrap();
        assert!((p.coords.iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let model = small_model(0.012_345_678_901_234_567);
        let text = model.to_json().unwrap();
        let back = LatentModel::from_json(&text).unwrap();
        assert_eq!(back.parts(), model.parts());
        assert_eq!(back.to_json().unwrap(), text);
    }
}
