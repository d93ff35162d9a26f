//! MAP objective: wrapped multitask marginal likelihood plus latent priors, with
//! analytic gradients in the unconstrained parameter vector.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::kron::KronSystem;
use super::model::LatentModel;
use super::{Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::{MultitaskKernel, SEKernel, TaskCovariance};
use crate::linalg::{chol_log_det, cholesky};
use crate::manifolds::ManifoldSpec;

const LN_2PI: f64 = 1.8378770664093453;

/// Gamma(2, 2) log-density of a lengthscale.
pub(crate) fn gamma_log_density(theta: f64) -> f64 {
    2.0 * 2f64.ln() + theta.ln() - 2.0 * theta
}

/// `Σ_i log|det ∂Exp_b(v_i)|` over uncentered tangent targets (rows of `raw`).
pub fn change_of_volume(spec: &ManifoldSpec, basepoint: &[f64], raw: &DMatrix<f64>) -> Result<f64> {
    if spec.is_euclidean() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..raw.nrows() {
        let v: Vec<f64> = raw.row(i).iter().copied().collect();
        total += spec.cov_log_det(basepoint, &v)?;
    }
    Ok(total)
}

/// Gaussian term and its gradients with respect to `K^x`, `k^f` and the noise variances.
pub(crate) struct GaussianTerms {
    pub value: f64,
    pub d_kx: DMatrix<f64>,
    pub d_kf: DMatrix<f64>,
    pub d_noise: Vec<f64>,
}

pub(crate) fn gaussian_terms(
    kf: &DMatrix<f64>,
    kx: &DMatrix<f64>,
    noise: &[f64],
    v: &DMatrix<f64>,
    want_grad: bool,
) -> Result<GaussianTerms> {
    let sys = KronSystem::new(kf, kx, noise)?;
    let (n, m) = (v.nrows(), v.ncols());
    let alpha = sys.solve(v);
    let value = -0.5 * v.component_mul(&alpha).sum() - 0.5 * sys.log_det() - 0.5 * (n * m) as f64 * LN_2PI;
    if !want_grad {
        return Ok(GaussianTerms { value, d_kx: DMatrix::zeros(0, 0), d_kf: DMatrix::zeros(0, 0), d_noise: vec![] });
    }
    let inv = &sys.inv_spectrum;
    let w = sys.whitened_task_vecs();
    let u = &sys.latent_vecs;
    // Σ_p λ̂_p / (λ̂_p λ_q + c) per latent eigenvector q.
    let latent_weights: DVector<f64> =
        DVector::from_fn(n, |q, _| (0..m).map(|p| sys.task_vals[p] * inv[(q, p)]).sum::<f64>());
    let task_weights: DVector<f64> =
        DVector::from_fn(m, |p, _| (0..n).map(|q| sys.latent_vals[q] * inv[(q, p)]).sum::<f64>());
    let noise_weights: DVector<f64> = DVector::from_fn(m, |p, _| (0..n).map(|q| inv[(q, p)]).sum::<f64>());

    let scaled_u = DMatrix::from_fn(n, n, |a, q| u[(a, q)] * latent_weights[q]);
    let d_kx = 0.5 * (&alpha * kf * alpha.transpose()) - 0.5 * scaled_u * u.transpose();
    let scaled_w = DMatrix::from_fn(m, m, |i, p| w[(i, p)] * task_weights[p]);
    let d_kf = 0.5 * (alpha.transpose() * kx * &alpha) - 0.5 * scaled_w * w.transpose();
    let d_noise = (0..m)
        .map(|i| {
            let quad: f64 = alpha.column(i).iter().map(|a| a * a).sum();
            let tr: f64 = (0..m).map(|p| w[(i, p)] * w[(i, p)] * noise_weights[p]).sum();
            0.5 * (quad - tr)
        })
        .collect();
    Ok(GaussianTerms { value, d_kx, d_kf, d_noise })
}

/// Chain rule from `∂ℓ/∂K` (symmetric) through a jittered SE Gram matrix to the
/// inputs, `log θ` and `log σ²`.
pub(crate) fn se_backprop(
    kernel: &SEKernel,
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> (DMatrix<f64>, f64, f64) {
    let (n, q) = (x.nrows(), x.ncols());
    let t2 = kernel.lengthscale * kernel.lengthscale;
    let mut dx = DMatrix::zeros(n, q);
    let mut d_log_theta = 0.0;
    let d_log_sigma2 = g.component_mul(k).sum();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let gk = g[(a, b)] * k[(a, b)];
            let mut r2 = 0.0;
            for r in 0..q {
                let diff = x[(a, r)] - x[(b, r)];
                r2 += diff * diff;
                dx[(a, r)] -= 2.0 * gk * diff / t2;
            }
            d_log_theta += gk * r2 / t2;
        }
    }
    (dx, d_log_theta, d_log_sigma2)
}

/// First-order GPDM log-density of the latent trajectories with its gradients
/// with respect to `X`, `log θ_d` and `log σ_d²`.
pub(crate) fn gpdm_terms(
    x: &DMatrix<f64>,
    trajectories: &[Range<usize>],
    kernel: &SEKernel,
    dynamics_noise: f64,
) -> Result<(f64, DMatrix<f64>, f64, f64)> {
    let q = x.ncols();
    let mut value = 0.0;
    let mut dx = DMatrix::zeros(x.nrows(), q);
    let (mut d_theta, mut d_sigma2) = (0.0, 0.0);
    for r in trajectories {
        let first = r.start;
        value -= 0.5 * x.row(first).norm_squared() + 0.5 * q as f64 * LN_2PI;
        for c in 0..q {
            dx[(first, c)] -= x[(first, c)];
        }
        let t = r.len();
        if t < 2 {
            continue;
        }
        let x_in = x.rows(r.start, t - 1).into_owned();
        let x_out = x.rows(r.start + 1, t - 1).into_owned();
        let k_se = kernel.gram_jittered(&x_in)?;
        let mut kd = k_se.clone();
        for i in 0..t - 1 {
            kd[(i, i)] += dynamics_noise;
        }
        let chol = cholesky(&kd, "GPDM dynamics covariance")?;
        let solved = chol.solve(&x_out);
        value -= 0.5 * x_out.component_mul(&solved).sum()
            + 0.5 * q as f64 * chol_log_det(&chol)
            + 0.5 * ((t - 1) * q) as f64 * LN_2PI;
        let kinv = chol.inverse();
        let g = 0.5 * (&solved * solved.transpose() - kinv * q as f64);
        let (dx_in, dt, ds) = se_backprop(kernel, &x_in, &k_se, &g);
        d_theta += dt;
        d_sigma2 += ds;
        for i in 0..t - 1 {
            for c in 0..q {
                dx[(r.start + i, c)] += dx_in[(i, c)];
                dx[(r.start + 1 + i, c)] -= solved[(i, c)];
            }
        }
    }
    Ok((value, dx, d_theta, d_sigma2))
}

/// Standard normal log-density of every latent point.
pub(crate) fn isotropic_prior(x: &DMatrix<f64>) -> f64 {
    -0.5 * x.norm_squared() - 0.5 * x.len() as f64 * LN_2PI
}

/// Dense-assembly Gaussian log-likelihood of `vec(V)`, for cross-checking the Kronecker path.
pub fn dense_log_likelihood(kernel: &MultitaskKernel, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let blocks = kernel.blocks(x, &vec![0.0; x.ncols()])?;
    let k = blocks.dense_k()?;
    let chol = cholesky(&k, "dense multitask covariance")?;
    let y = DVector::from_column_slice(v.as_slice());
    let alpha = chol.solve(&y);
    Ok(-0.5 * y.dot(&alpha) - 0.5 * chol_log_det(&chol) - 0.5 * y.len() as f64 * LN_2PI)
}

/// Log marginal likelihood of `dataset` under the model, including the change-of-volume term.
pub fn log_marginal_likelihood(model: &LatentModel, dataset: &Dataset) -> Result<f64> {
    let terms = model.likelihood_terms(dataset)?;
    Ok(terms.log_likelihood - terms.change_of_volume)
}

/// Latent prior of the model: GPDM or standard normal, plus Gamma lengthscale priors.
pub fn log_prior(model: &LatentModel) -> Result<f64> {
    let config = model.config();
    let mut total = match (config.gpdm, model.dynamics()) {
        (true, Some(d)) => {
            let kernel = SEKernel::new(d.theta, d.sigma2)?;
            gpdm_terms(model.latent(), &model.trajectories(), &kernel, d.noise)?.0
        }
        _ => isotropic_prior(model.latent()),
    };
    if config.gamma_lengthscale_prior {
        total += gamma_log_density(model.kernel().latent.lengthscale);
        if let (true, Some(d)) = (config.gpdm, model.dynamics()) {
            total += gamma_log_density(d.theta);
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub log_likelihood: f64,
    pub change_of_volume: f64,
    pub log_prior: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.log_likelihood - self.change_of_volume + self.log_prior
    }
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Layout {
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub rank: usize,
    pub noise_params: usize,
    pub gpdm: bool,
}

impl Layout {
    pub fn latent(&self) -> Range<usize> {
        0..self.n * self.q
    }
    pub fn log_theta(&self) -> usize {
        self.n * self.q
    }
    pub fn log_sigma2(&self) -> usize {
        self.n * self.q + 1
    }
    pub fn task_b(&self) -> Range<usize> {
        let s = self.n * self.q + 2;
        s..s + self.m * self.rank
    }
    pub fn log_v(&self) -> Range<usize> {
        let s = self.task_b().end;
        s..s + self.m
    }
    pub fn log_noise(&self) -> Range<usize> {
        let s = self.log_v().end;
        s..s + self.noise_params
    }
    pub fn dynamics(&self) -> Option<usize> {
        self.gpdm.then(|| self.log_noise().end)
    }
    pub fn len(&self) -> usize {
        self.log_noise().end + if self.gpdm { 2 } else { 0 }
    }
}

/// Structured view of a flat parameter vector.
pub(crate) struct Unpacked {
    /// Latent matrix, or the transposed back-constraint weights.
    pub z: DMatrix<f64>,
    pub latent: SEKernel,
    pub task: TaskCovariance,
    pub noise: Vec<f64>,
    pub dynamics: Option<SEKernel>,
}

fn positive(what: &str, log_value: f64) -> Result<f64> {
    let v = log_value.exp();
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Numerical(format!("{what} left the representable range (log value {log_value})")));
    }
    Ok(v)
}

impl Layout {
    pub fn unpack(&self, p: &[f64]) -> Result<Unpacked> {
        if p.len() != self.len() {
            return Err(Error::Dimension(format!("{} parameters, {} expected", p.len(), self.len())));
        }
        let z = DMatrix::from_row_slice(self.n, self.q, &p[self.latent()]);
        let latent = SEKernel::new(
            positive("lengthscale", p[self.log_theta()])?,
            positive("signal variance", p[self.log_sigma2()])?,
        )?;
        let b = DMatrix::from_row_slice(self.m, self.rank, &p[self.task_b()]);
        let v = DVector::from_iterator(self.m, p[self.log_v()].iter().map(|x| x.exp()));
        let task = TaskCovariance::new(b, v).map_err(|e| Error::Numerical(e.to_string()))?;
        let noise: Vec<f64> =
            p[self.log_noise()].iter().map(|&x| positive("noise variance", x)).collect::<Result<_>>()?;
        let noise = if noise.len() == 1 { vec![noise[0]; self.m] } else { noise };
        let dynamics = match self.dynamics() {
            Some(o) => {
                Some(SEKernel::new(positive("dynamics lengthscale", p[o])?, positive("dynamics variance", p[o + 1])?)?)
            }
            None => None,
        };
        Ok(Unpacked { z, latent, task, noise, dynamics })
    }

    pub fn pack(&self, u: &Unpacked) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        for i in 0..self.n {
            for c in 0..self.q {
                p[i * self.q + c] = u.z[(i, c)];
            }
        }
        p[self.log_theta()] = u.latent.lengthscale.ln();
        p[self.log_sigma2()] = u.latent.variance.ln();
        let tb = self.task_b().start;
        for i in 0..self.m {
            for j in 0..self.rank {
                p[tb + i * self.rank + j] = u.task.b[(i, j)];
            }
        }
        for (slot, v) in p[self.log_v()].iter_mut().zip(u.task.v.iter()) {
            *slot = v.ln();
        }
        let ln = self.log_noise().start;
        for k in 0..self.noise_params {
            p[ln + k] = u.noise[k].ln();
        }
        if let (Some(o), Some(d)) = (self.dynamics(), &u.dynamics) {
            p[o] = d.lengthscale.ln();
            p[o + 1] = d.variance.ln();
        }
        p
    }
}

/// The MAP objective `log p(Y | X, ψ) + log p(X, ψ)` of a dataset, as a
/// function of the flat unconstrained parameter vector.
#[derive(Clone, Debug)]
pub struct MapObjective {
    pub(crate) layout: Layout,
    pub(crate) targets: DMatrix<f64>,
    pub(crate) trajectories: Vec<Range<usize>>,
    pub(crate) bc_features: Option<DMatrix<f64>>,
    pub(crate) gamma_prior: bool,
    pub(crate) dynamics_noise: f64,
    pub(crate) change_of_volume: f64,
}

impl MapObjective {
    /// Objective for `dataset` together with the initial parameter vector.
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<(Self, Vec<f64>)> {
        super::train::setup(dataset, config).map(|s| (s.objective, s.initial))
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.len() == 0
    }

    /// Latent variables implied by `params` (back constraints applied when enabled).
    pub fn latent(&self, params: &[f64]) -> Result<DMatrix<f64>> {
        let u = self.layout.unpack(params)?;
        Ok(self.latent_from(&u.z))
    }

    fn latent_from(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.bc_features {
            Some(k) => k * z,
            None => z.clone(),
        }
    }

    pub fn terms(&self, params: &[f64]) -> Result<ObjectiveTerms> {
        self.evaluate(params, false).map(|(t, _)| t)
    }

    pub fn value(&self, params: &[f64]) -> Result<f64> {
        self.terms(params).map(|t| t.total())
    }

    pub fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (t, g) = self.evaluate(params, true)?;
        Ok((t.total(), g.expect("gradient requested")))
    }

    fn evaluate(&self, params: &[f64], want_grad: bool) -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
        let lay = self.layout;
        let u = self.layout.unpack(params)?;
        let x = self.latent_from(&u.z);
        let kx = u.latent.gram_jittered(&x)?;
        let kf = u.task.matrix();
        let gauss = gaussian_terms(&kf, &kx, &u.noise, &self.targets, want_grad)?;

        let mut prior = 0.0;
        let mut dx = DMatrix::zeros(lay.n, lay.q);
        let mut grad = vec![0.0; lay.len()];
        match (&u.dynamics, lay.dynamics()) {
            (Some(dk), Some(o)) => {
                let (v, gx, dt, ds) = gpdm_terms(&x, &self.trajectories, dk, self.dynamics_noise)?;
                prior += v;
                dx += gx;
                grad[o] = dt;
                grad[o + 1] = ds;
                if self.gamma_prior {
                    prior += gamma_log_density(dk.lengthscale);
                    grad[o] += 1.0 - 2.0 * dk.lengthscale;
                }
            }
            _ => {
                prior += isotropic_prior(&x);
                dx -= &x;
            }
        }
        if self.gamma_prior {
            prior += gamma_log_density(u.latent.lengthscale);
            grad[lay.log_theta()] += 1.0 - 2.0 * u.latent.lengthscale;
        }
        let terms =
            ObjectiveTerms { log_likelihood: gauss.value, change_of_volume: self.change_of_volume, log_prior: prior };
        if !want_grad {
            return Ok((terms, None));
        }

        let (gx, dt, ds) = se_backprop(&u.latent, &x, &kx, &gauss.d_kx);
        dx += gx;
        grad[lay.log_theta()] += dt;
        grad[lay.log_sigma2()] += ds;
        let dz = match &self.bc_features {
            Some(k) => k.transpose() * dx,
            None => dx,
        };
        for i in 0..lay.n {
            for c in 0..lay.q {
                grad[i * lay.q + c] = dz[(i, c)];
            }
        }
        let db = 2.0 * &gauss.d_kf * &u.task.b;
        let tb = lay.task_b().start;
        for i in 0..lay.m {
            for j in 0..lay.rank {
                grad[tb + i * lay.rank + j] = db[(i, j)];
            }
        }
        for (k, slot) in lay.log_v().enumerate() {
            grad[slot] = gauss.d_kf[(k, k)] * u.task.v[k];
        }
        let ln = lay.log_noise().start;
        if lay.noise_params == 1 {
            grad[ln] = gauss.d_noise.iter().sum::<f64>() * u.noise[0];
        } else {
            for k in 0..lay.noise_params {
                grad[ln + k] = gauss.d_noise[k] * u.noise[k];
            }
        }
        Ok((terms, Some(grad)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn standard_normal_at_zero() {
        let kernel = MultitaskKernel {
            latent: SEKernel::new(1.0, 1.0).unwrap(),
            task: TaskCovariance::new(DMatrix::zeros(1, 0), DVector::from_element(1, 1.0)).unwrap(),
            noise: crate::kernels::Noise::Shared(0.0),
        };
        let x = DMatrix::zeros(1, 1);
        let v = DMatrix::zeros(1, 1);
        let kf = kernel.task.matrix();
        let kx = kernel.latent.gram_jittered(&x).unwrap();
        let g = gaussian_terms(&kf, &kx, &[0.0], &v, false).unwrap();
        assert!((g.value + 0.5 * (2.0 * PI).ln()).abs() < 1e-8);
        assert!((dense_log_likelihood(&kernel, &x, &v).unwrap() - g.value).abs() < 1e-12);
    }

    #[test]
    fn gamma_at_one() {
        assert!((gamma_log_density(1.0) - (4f64.ln() - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn isotropic_prior_at_zero() {
        let x = DMatrix::zeros(5, 2);
        assert!((isotropic_prior(&x) + 5.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_point_trajectory_density() {
        let x = DMatrix::from_row_slice(2, 1, &[0.3, -0.4]);
        let kernel = SEKernel::new(1.0, 1.0).unwrap();
        let noise = 0.1;
        let (v, _, _, _) = gpdm_terms(&x, std::slice::from_ref(&(0..2)), &kernel, noise).unwrap();
        let var0 = 1.0;
        let var1 = 1.0 + 1e-8 + noise;
        let expected =
            -0.5 * (2.0 * PI * var0).ln() - 0.5 * 0.09 / var0 - 0.5 * (2.0 * PI * var1).ln() - 0.5 * 0.16 / var1;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn layout_roundtrip() {
        let lay = Layout { n: 3, q: 2, m: 2, rank: 2, noise_params: 2, gpdm: true };
        let p: Vec<f64> = (0..lay.len()).map(|i| 0.1 * i as f64 - 0.5).collect();
        let u = lay.unpack(&p).unwrap();
        let back = lay.pack(&u);
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
