//! Jacobian posterior of the tangent GP, expected pullback metric, magnification
//! factors and the KDE metric baseline.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::DENSE_LIMIT;
use crate::linalg::{cholesky, floor_spectrum, kron, symmetrize};
use crate::lvm::LatentModel;

/// Finite-difference step for the exponential-map Jacobian.
pub const EXP_FD_STEP: f64 = 1e-6;

/// Relative eigenvalue floor applied to metric estimates.
pub const PSD_FLOOR: f64 = 1e-10;

/// Matrix-normal posterior of the transposed tangent Jacobian `J_fᵀ` (`Q × M`).
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianPosterior {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
    pub col_cov: DMatrix<f64>,
}

impl JacobianPosterior {
    /// Column-stacked mean; entry `m·Q + r` is `∂f_m/∂x_r`.
    pub fn vec_mean(&self) -> DVector<f64> {
        DVector::from_column_slice(self.mean.as_slice())
    }

    /// Covariance of the column-stacked Jacobian, `col_cov ⊗ row_cov`.
    pub fn vec_cov(&self) -> DMatrix<f64> {
        kron(&self.col_cov, &self.row_cov)
    }
}

/// Vectorized Gaussian posterior of `vec(J_fᵀ)` assembled densely.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizedJacobian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn cross_terms(model: &LatentModel, xs: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = &model.kernel().latent;
    Ok((k.grad_cross(model.latent(), xs)?, k.hess_self(model.latent_dim())))
}

/// Posterior of the Jacobian given the denoised training outputs
/// `F̂ = (k^f ⊗ K^x) K⁻¹ vec(V)`; its mean is the exact derivative of the
/// posterior-mean decoder.
pub fn jacobian_posterior(model: &LatentModel, xs: &[f64]) -> Result<JacobianPosterior> {
    if xs.len() != model.latent_dim() {
        return Err(Error::Dimension(format!(
            "latent query has {} coordinates, model has {}",
            xs.len(),
            model.latent_dim()
        )));
    }
    let (dk, d2k) = cross_terms(model, xs)?;
    let mean = dk.transpose() * model.alpha() * model.kf();
    let solved = model.kx_cholesky().solve(&dk);
    let row_cov = symmetrize(&(d2k - dk.transpose() * solved));
    Ok(JacobianPosterior { mean, row_cov, col_cov: model.kf().clone() })
}

/// Dense vectorized form: `μ = (k^f ⊗ ∂K^x)ᵀ (k^f ⊗ K^x)⁻¹ F̂` and
/// `Σ = k^f ⊗ ∂²K^x − (k^f ⊗ ∂K^x)ᵀ (k^f ⊗ K^x)⁻¹ (k^f ⊗ ∂K^x)`.
pub fn jacobian_posterior_dense(model: &LatentModel, xs: &[f64]) -> Result<VectorizedJacobian> {
    let (n, m) = (model.len(), model.spec().intrinsic_dim());
    if n * m > DENSE_LIMIT {
        return Err(Error::Unsupported(format!("dense Jacobian posterior needs N·M ≤ {DENSE_LIMIT}")));
    }
    let (dk, d2k) = cross_terms(model, xs)?;
    let kf = model.kf();
    let kx = model.kx();
    let k_signal = kron(kf, kx);
    let mut k_full = k_signal.clone();
    let noise = model.kernel().noise.per_task(m);
    for (t, s) in noise.iter().enumerate() {
        for i in 0..n {
            k_full[(t * n + i, t * n + i)] += s;
        }
    }
    let y = DVector::from_column_slice(model.targets().as_slice());
    let f_hat = &k_signal * cholesky(&k_full, "dense multitask covariance")?.solve(&y);
    let dk_full = kron(kf, &dk);
    let chol = cholesky(&k_signal, "dense noise-free covariance")?;
    let mean = dk_full.transpose() * chol.solve(&f_hat);
    let cov = kron(kf, &d2k) - dk_full.transpose() * chol.solve(&dk_full);
    Ok(VectorizedJacobian { mean, cov: symmetrize(&cov) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Differentiation {
    Analytic,
    FiniteDifference,
}

/// Jacobian of `v ↦ Exp_b(v)` at the posterior mean `f̂(x*)`, from basepoint
/// frame coefficients to frame coefficients at the decoded point.
pub fn exp_jacobian(model: &LatentModel, xs: &[f64], method: Differentiation) -> Result<DMatrix<f64>> {
    let spec = model.spec();
    let base = &model.parts().basepoint;
    let mean = model.predict_mean(xs)?;
    let y = spec.exp(base, mean.as_slice())?;
    let frame = spec.basis(&y)?;
    let ambient = match method {
        Differentiation::Analytic => spec.exp_differential(base, mean.as_slice())?,
        Differentiation::FiniteDifference => {
            let m = mean.len();
            let mut jac = DMatrix::zeros(spec.ambient_dim(), m);
            for a in 0..m {
                let mut plus = mean.clone();
                let mut minus = mean.clone();
                plus[a] += EXP_FD_STEP;
                minus[a] -= EXP_FD_STEP;
                let yp = DVector::from_vec(spec.exp(base, plus.as_slice())?);
                let ym = DVector::from_vec(spec.exp(base, minus.as_slice())?);
                jac.set_column(a, &((yp - ym) / (2.0 * EXP_FD_STEP)));
            }
            jac
        }
    };
    Ok(frame.transpose() * ambient)
}

/// Metric of the data manifold at the decoded point, in its frame coordinates.
pub fn ambient_metric(model: &LatentModel, xs: &[f64]) -> Result<DMatrix<f64>> {
    let y = model.decode_coords(xs)?;
    model.spec().metric_gram(&y)
}

/// `E[Jᵀ] Ǧ E[J] + Tr(Ǧ k^f) Σ_r`, before symmetrization and flooring.
pub fn expected_pullback_raw(jp: &JacobianPosterior, g_check: &DMatrix<f64>) -> DMatrix<f64> {
    &jp.mean * g_check * jp.mean.transpose() + &jp.row_cov * (g_check.transpose() * &jp.col_cov).trace()
}

/// Symmetrizes and clamps eigenvalues at `PSD_FLOOR · trace / Q`.
pub fn floor_metric(g: &DMatrix<f64>) -> DMatrix<f64> {
    let g = symmetrize(g);
    let q = g.nrows() as f64;
    let floor = (PSD_FLOOR * g.trace() / q).max(f64::MIN_POSITIVE);
    floor_spectrum(&g, floor)
}

/// `Ǧ = J_Expᵀ Ĝ J_Exp` at `x*`.
pub fn tangent_metric(model: &LatentModel, xs: &[f64]) -> Result<DMatrix<f64>> {
    let j = exp_jacobian(model, xs, Differentiation::Analytic)?;
    let g_hat = ambient_metric(model, xs)?;
    Ok(symmetrize(&(j.transpose() * g_hat * &j)))
}

/// Expected pullback metric `E[G̃](x*)`.
pub fn expected_pullback(model: &LatentModel, xs: &[f64]) -> Result<DMatrix<f64>> {
    let jp = jacobian_posterior(model, xs)?;
    let g_check = tangent_metric(model, xs)?;
    Ok(floor_metric(&expected_pullback_raw(&jp, &g_check)))
}

/// `√det E[G̃](x*)`.
pub fn magnification(model: &LatentModel, xs: &[f64]) -> Result<f64> {
    Ok(expected_pullback(model, xs)?.determinant().max(0.0).sqrt())
}

/// A Riemannian metric on a latent space.
pub trait MetricField: Sync {
    fn dim(&self) -> usize;
    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>>;
}

/// Expected pullback metric of a trained model.
pub struct PullbackMetric<'a> {
    pub model: &'a LatentModel,
}

impl MetricField for PullbackMetric<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        expected_pullback(self.model, x)
    }
}

/// The flat metric `G = I`.
pub struct EuclideanMetric(pub usize);

impl MetricField for EuclideanMetric {
    fn dim(&self) -> usize {
        self.0
    }

    fn metric(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.0, self.0))
    }
}

/// A metric given by a closure.
pub struct FnMetric<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> DMatrix<f64> + Sync> MetricField for FnMetric<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.f)(x))
    }
}

/// Isotropic metric `λ(x) I` with `λ = (p(x) + ε)^{−2/Q}` from a Gaussian KDE of
/// the latent training points.
#[derive(Clone, Debug)]
pub struct KdeMetric {
    points: DMatrix<f64>,
    sigma: f64,
    eps: f64,
}

impl KdeMetric {
    pub fn new(points: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!("KDE bandwidth must be positive, got {sigma}")));
        }
        if points.nrows() == 0 {
            return Err(Error::Validation("KDE needs at least one training point".into()));
        }
        let mut kde = Self { points, sigma, eps: 0.0 };
        let max_p = (0..kde.points.nrows())
            .map(|i| kde.density(&kde.points.row(i).iter().copied().collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        kde.eps = 1e-12 * max_p;
        Ok(kde)
    }

    /// `p(x) = Σ_n (2π)^{−Q/2} σ^{−Q} exp(−‖x − x_n‖² / (2σ²))`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let q = self.points.ncols() as f64;
        let norm = (2.0 * std::f64::consts::PI).powf(-q / 2.0) * self.sigma.powf(-q);
        let s2 = self.sigma * self.sigma;
        (0..self.points.nrows())
            .map(|n| {
                let d2: f64 = self.points.row(n).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                norm * (-0.5 * d2 / s2).exp()
            })
            .sum()
    }

    pub fn lambda(&self, x: &[f64]) -> f64 {
        let q = self.points.ncols() as f64;
        (self.density(x) + self.eps).powf(-2.0 / q)
    }
}

impl MetricField for KdeMetric {
    fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.dim();
        Ok(DMatrix::identity(q, q) * self.lambda(x))
    }
}

pub fn kde_metric(x_train: &DMatrix<f64>, sigma: f64, xs: &[f64]) -> Result<f64> {
    Ok(KdeMetric::new(x_train.clone(), sigma)?.lambda(xs))
}

/// Axis-aligned rectangle in a 2-D latent space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..2 {
            if !(self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k]) {
                return Err(Error::Validation(format!("bounds need min < max, got {:?} and {:?}", self.min, self.max)));
            }
        }
        Ok(())
    }

    /// Bounding box of the rows of `x`, padded by `pad` times its extent on each side.
    pub fn around(x: &DMatrix<f64>, pad: f64) -> Result<Self> {
        if x.ncols() != 2 || x.nrows() == 0 {
            return Err(Error::Unsupported("bounds are only defined for non-empty 2-D latent sets".into()));
        }
        let mut b = Bounds { min: [f64::INFINITY; 2], max: [f64::NEG_INFINITY; 2] };
        for i in 0..x.nrows() {
            for k in 0..2 {
                b.min[k] = b.min[k].min(x[(i, k)]);
                b.max[k] = b.max[k].max(x[(i, k)]);
            }
        }
        for k in 0..2 {
            let extent = (b.max[k] - b.min[k]).max(1e-6);
            b.min[k] -= pad * extent;
            b.max[k] += pad * extent;
        }
        b.validate()?;
        Ok(b)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..2).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    /// Inclusive linearly spaced coordinates along axis `k`.
    pub fn axis(&self, k: usize, resolution: usize) -> Vec<f64> {
        if resolution == 1 {
            return vec![0.5 * (self.min[k] + self.max[k])];
        }
        (0..resolution)
            .map(|i| self.min[k] + (self.max[k] - self.min[k]) * i as f64 / (resolution - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x1: f64,
    pub x2: f64,
    pub g11: f64,
    pub g12: f64,
    pub g22: f64,
    pub magnification: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricGrid {
    pub bounds: Bounds,
    pub resolution: usize,
    /// Row-major: `x2` varies slowest.
    pub cells: Vec<GridCell>,
}

impl MetricGrid {
    pub fn header() -> Vec<String> {
        ["x1", "x2", "g11", "g12", "g22", "magnification"].iter().map(|s| s.to_string()).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|c| vec![c.x1, c.x2, c.g11, c.g12, c.g22, c.magnification]).collect()
    }
}

/// Evaluates `field` on a `resolution × resolution` grid; cells are computed in
/// parallel and returned in row-major order.
pub fn metric_grid(field: &dyn MetricField, bounds: Bounds, resolution: usize) -> Result<MetricGrid> {
    if field.dim() != 2 {
        return Err(Error::Unsupported(format!("metric grids need a 2-D latent space, got {}", field.dim())));
    }
    bounds.validate()?;
    if resolution == 0 {
        return Err(Error::Validation("grid resolution must be positive".into()));
    }
    let xs = bounds.axis(0, resolution);
    let ys = bounds.axis(1, resolution);
    let cells = (0..resolution * resolution)
        .into_par_iter()
        .map(|idx| {
            let (x1, x2) = (xs[idx % resolution], ys[idx / resolution]);
            let g = field.metric(&[x1, x2])?;
            Ok(GridCell {
                x1,
                x2,
                g11: g[(0, 0)],
                g12: g[(0, 1)],
                g22: g[(1, 1)],
                magnification: g.determinant().max(0.0).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricGrid { bounds, resolution, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_single_point() {
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
        let sigma = 0.5;
        let p = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let lambda = kde_metric(&x, sigma, &[0.3, -0.2]).unwrap();
        assert!((lambda - (p * (1.0 + 1e-12)).powf(-1.0)).abs() < 1e-12 * lambda);
    }

    #[test]
    fn kde_lambda_monotone_along_ray() {
        let x = DMatrix::from_row_slice(4, 2, &[0.1, 0.0, -0.1, 0.0, 0.0, 0.1, 0.0, -0.1]);
        let kde = KdeMetric::new(x, 0.3).unwrap();
        let mut last = 0.0;
        for i in 1..20 {
            let l = kde.lambda(&[0.05 * i as f64, 0.03 * i as f64]);
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn magnification_arithmetic() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let f = FnMetric { dim: 2, f: move |_: &[f64]| g.clone() };
        let grid = metric_grid(&f, Bounds { min: [0.0, 0.0], max: [1.0, 1.0] }, 2).unwrap();
        assert_eq!(grid.cells.len(), 4);
        assert!(grid.cells.iter().all(|c| (c.magnification - 6.0).abs() < 1e-12));
        assert_eq!((grid.cells[1].x1, grid.cells[1].x2), (1.0, 0.0));
        assert_eq!((grid.cells[2].x1, grid.cells[2].x2), (0.0, 1.0));
    }

    #[test]
    fn grid_rejects_bad_input() {
        let f = EuclideanMetric(3);
        assert!(matches!(metric_grid(&f, Bounds { min: [0.0, 0.0], max: [1.0, 1.0] }, 2), Err(Error::Unsupported(_))));
        let f = EuclideanMetric(2);
        assert!(metric_grid(&f, Bounds { min: [1.0, 0.0], max: [1.0, 1.0] }, 2).is_err());
    }
}
