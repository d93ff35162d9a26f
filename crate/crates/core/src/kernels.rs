//! Latent SE kernel, multitask Kronecker covariance and back-constraint kernels on manifolds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, JITTER};
use crate::manifolds::ManifoldSpec;

/// Largest `N·M` for which dense `NM × NM` covariance assembly is allowed.
pub const DENSE_LIMIT: usize = 4000;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Validation(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_finite(what: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// `k(x, y) = σ² exp(−‖x − y‖² / (2θ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SEKernel {
    pub lengthscale: f64,
    pub variance: f64,
}

impl SEKernel {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self> {
        check_positive("lengthscale", lengthscale)?;
        check_positive("variance", variance)?;
        Ok(Self { lengthscale, variance })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.variance * (-0.5 * sq / (self.lengthscale * self.lengthscale)).exp()
    }

    /// Gram matrix over the rows of `x`, without jitter.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_finite("latent inputs", x)?;
        let n = x.nrows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.variance;
            for j in 0..i {
                let v = self.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Gram matrix with `JITTER · σ²` on the diagonal, the form used for factorization.
    pub fn gram_jittered(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.gram(x)?;
        for i in 0..k.nrows() {
            k[(i, i)] += JITTER * self.variance;
        }
        Ok(k)
    }

    /// `[k(x_n, x*)]_n`.
    pub fn cross(&self, x: &DMatrix<f64>, xs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|n| self.eval(x.row(n).iter().copied().collect::<Vec<_>>().as_slice(), xs)),
        )
    }

    /// `[∂k(x_n, x*)/∂x*_r]`, an `N × Q` matrix.
    pub fn grad_cross(&self, x: &DMatrix<f64>, xs: &[f64]) -> Result<DMatrix<f64>> {
        if xs.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "query has {} coordinates, latent space has {}",
                xs.len(),
                x.ncols()
            )));
        }
        check_finite("latent inputs", x)?;
        let k = self.cross(x, xs);
        let t2 = self.lengthscale * self.lengthscale;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |n, r| k[n] * (x[(n, r)] - xs[r]) / t2))
    }

    /// `[∂²k(x, x')/∂x_r ∂x'_s]` at `x = x' = x*`, which is `(σ²/θ²) I` for the SE kernel.
    pub fn hess_self(&self, q: usize) -> DMatrix<f64> {
        DMatrix::identity(q, q) * (self.variance / (self.lengthscale * self.lengthscale))
    }
}

/// `k^f = B Bᵀ + diag(v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCovariance {
    pub b: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl TaskCovariance {
    pub fn new(b: DMatrix<f64>, v: DVector<f64>) -> Result<Self> {
        if b.nrows() != v.len() {
            return Err(Error::Dimension(format!("B has {} rows but v has {} entries", b.nrows(), v.len())));
        }
        for &x in v.iter() {
            check_positive("task variance", x)?;
        }
        check_finite("task factor B", &b)?;
        Ok(Self { b, v })
    }

    pub fn identity(m: usize) -> Self {
        Self { b: DMatrix::zeros(m, 0), v: DVector::from_element(m, 1.0) }
    }

    pub fn tasks(&self) -> usize {
        self.v.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.b * self.b.transpose() + DMatrix::from_diagonal(&self.v)
    }
}

/// Observation noise, either shared by all tasks or one variance per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Noise {
    Shared(f64),
    PerTask(Vec<f64>),
}

impl Noise {
    pub fn per_task(&self, m: usize) -> Vec<f64> {
        match self {
            Noise::Shared(s) => vec![*s; m],
            Noise::PerTask(v) => v.clone(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if let Noise::PerTask(v) = self {
            if v.len() != m {
                return Err(Error::Dimension(format!("{} noise variances for {m} tasks", v.len())));
            }
        }
        self.per_task(m).iter().try_for_each(|&s| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(Error::Validation(format!("noise variance must be non-negative, got {s}")))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskKernel {
    pub latent: SEKernel,
    pub task: TaskCovariance,
    pub noise: Noise,
}

/// Kronecker factors of the joint covariance of `vec(V)` (task-major: the
/// `N` values of task 0, then task 1, …) and of its latent derivatives.
#[derive(Clone, Debug)]
pub struct MultitaskBlocks {
    pub kf: DMatrix<f64>,
    pub kx: DMatrix<f64>,
    pub dkx: DMatrix<f64>,
    pub d2kx: DMatrix<f64>,
    pub noise: Vec<f64>,
}

fn dense_guard(rows: usize) -> Result<()> {
    if rows > DENSE_LIMIT {
        return Err(Error::Unsupported(format!(
            "dense assembly of a {rows}×{rows} covariance exceeds the {DENSE_LIMIT} limit; use the Kronecker path"
        )));
    }
    Ok(())
}

impl MultitaskBlocks {
    /// `k^f ⊗ K^x + diag(noise) ⊗ I_N`.
    pub fn dense_k(&self) -> Result<DMatrix<f64>> {
        let n = self.kx.nrows();
        dense_guard(n * self.kf.nrows())?;
        let mut k = kron(&self.kf, &self.kx);
        for (t, s) in self.noise.iter().enumerate() {
            for i in 0..n {
                k[(t * n + i, t * n + i)] += s;
            }
        }
        Ok(k)
    }

    /// `k^f ⊗ ∂K^x`.
    pub fn dense_dk(&self) -> Result<DMatrix<f64>> {
        dense_guard(self.kx.nrows() * self.kf.nrows())?;
        Ok(kron(&self.kf, &self.dkx))
    }

    /// `k^f ⊗ ∂²K^x`.
    pub fn dense_d2k(&self) -> DMatrix<f64> {
        kron(&self.kf, &self.d2kx)
    }
}

impl MultitaskKernel {
    pub fn tasks(&self) -> usize {
        self.task.tasks()
    }

    pub fn blocks(&self, x: &DMatrix<f64>, xs: &[f64]) -> Result<MultitaskBlocks> {
        self.noise.validate(self.tasks())?;
        Ok(MultitaskBlocks {
            kf: self.task.matrix(),
            kx: self.latent.gram_jittered(x)?,
            dkx: self.latent.grad_cross(x, xs)?,
            d2kx: self.latent.hess_self(x.ncols()),
            noise: self.noise.per_task(self.tasks()),
        })
    }
}

pub fn gram(kernel: &SEKernel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kernel.gram(x)
}

pub fn grad_cross(kernel: &SEKernel, x: &DMatrix<f64>, xs: &[f64]) -> Result<DMatrix<f64>> {
    kernel.grad_cross(x, xs)
}

pub fn hess_self(kernel: &SEKernel, q: usize) -> DMatrix<f64> {
    kernel.hess_self(q)
}

pub fn multitask_blocks(kernel: &MultitaskKernel, x: &DMatrix<f64>, xs: &[f64]) -> Result<MultitaskBlocks> {
    kernel.blocks(x, xs)
}

/// Parameters of one non-product factor of a back-constraint kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BCComponent {
    pub lengthscale: f64,
    pub variance: f64,
}

impl Default for BCComponent {
    fn default() -> Self {
        Self { lengthscale: 1.0, variance: 1.0 }
    }
}

/// Similarity kernel on data points used to parametrize latent variables.
///
/// Euclidean factors use an SE kernel, sphere factors a truncated heat-kernel
/// series in normalized Gegenbauer polynomials, SPD factors an SE kernel of the
/// affine-invariant distance. The kernel is the product over factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiemannianBCKernel {
    pub spec: ManifoldSpec,
    pub components: Vec<BCComponent>,
    pub n_max: usize,
}

impl RiemannianBCKernel {
    pub fn new(spec: ManifoldSpec, components: Vec<BCComponent>, n_max: usize) -> Result<Self> {
        let factors = spec.factors().len();
        if components.len() != factors {
            return Err(Error::Dimension(format!(
                "{} kernel components for {factors} manifold factors",
                components.len()
            )));
        }
        for c in &components {
            check_positive("back-constraint lengthscale", c.lengthscale)?;
            check_positive("back-constraint variance", c.variance)?;
        }
        Ok(Self { spec, components, n_max })
    }

    pub fn with_defaults(spec: ManifoldSpec) -> Self {
        let n = spec.factors().len();
        Self { spec, components: vec![BCComponent::default(); n], n_max: 10 }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let dim = self.spec.ambient_dim();
        if a.len() != dim || b.len() != dim {
            return Err(Error::Dimension(format!("back-constraint kernel expects {dim} ambient coordinates")));
        }
        let mut value = 1.0;
        for (f, c) in self.spec.factors().iter().zip(&self.components) {
            let (x, y) = (&a[f.ambient.clone()], &b[f.ambient.clone()]);
            value *= match f.spec {
                ManifoldSpec::Sphere { dim } => {
                    let cos_t: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    c.variance * sphere_heat_kernel(*dim, c.lengthscale, cos_t.clamp(-1.0, 1.0), self.n_max)
                }
                spec => {
                    let d = spec.distance(x, y)?;
                    c.variance * (-0.5 * d * d / (c.lengthscale * c.lengthscale)).exp()
                }
            };
        }
        Ok(value)
    }

    /// `N × N` matrix of kernel values over the rows of `points`.
    pub fn matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let n = points.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&points[i], &points[j])?;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

pub fn bc_kernel_eval(k: &RiemannianBCKernel, a: &[f64], b: &[f64]) -> Result<f64> {
    k.eval(a, b)
}

/// `Σ_n e^{−θ² n(n+d−1)/2} dim_n P_n(cos t) / Σ_n e^{−θ² n(n+d−1)/2} dim_n`, with
/// `P_n` the Gegenbauer polynomial of index `(d−1)/2` normalized to `P_n(1) = 1`
/// and `dim_n` the dimension of degree-`n` spherical harmonics on `S^d`.
fn sphere_heat_kernel(d: usize, theta: f64, cos_t: f64, n_max: usize) -> f64 {
    let df = d as f64;
    let alpha = (df - 1.0) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    // Gegenbauer recurrence evaluated at cos t and at 1.
    let (mut c_prev, mut c_cur) = (0.0, 1.0);
    let (mut one_prev, mut one_cur) = (0.0, 1.0);
    let mut harmonics_dim = 1.0;
    let angle = cos_t.acos();
    for n in 0..=n_max {
        let nf = n as f64;
        if n > 0 {
            harmonics_dim =
                if d == 1 { 2.0 } else { (2.0 * nf + df - 1.0) / (nf + df - 1.0) * binomial(nf + df - 1.0, n) };
        }
        let p = if d == 1 {
            (nf * angle).cos()
        } else {
            if n > 0 {
                let step = |prev: f64, cur: f64, t: f64| {
                    if n == 1 {
                        2.0 * alpha * t
                    } else {
                        (2.0 * t * (nf + alpha - 1.0) * cur - (nf + 2.0 * alpha - 2.0) * prev) / nf
                    }
                };
                let next = step(c_prev, c_cur, cos_t);
                c_prev = c_cur;
                c_cur = next;
                let next_one = step(one_prev, one_cur, 1.0);
                one_prev = one_cur;
                one_cur = next_one;
            }
            c_cur / one_cur
        };
        let w = (-theta * theta * nf * (nf + df - 1.0) / 2.0).exp() * harmonics_dim;
        num += w * p;
        den += w;
    }
    num / den
}

/// `C(a, k)` for real `a` and integer `k`.
fn binomial(a: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (a - i as f64) / (i as f64 + 1.0))
}
