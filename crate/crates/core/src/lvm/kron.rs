//! Solves and determinants with `K = k^f ⊗ K^x + diag(s) ⊗ I_N` through the
//! eigendecompositions of its factors.
//!
//! Heterogeneous noise is handled by whitening: with `s = c·d²`,
//! `K = (D ⊗ I)(D⁻¹k^fD⁻¹ ⊗ K^x + cI)(D ⊗ I)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, sym_eig};

#[derive(Clone, Debug)]
pub struct KronSystem {
    /// Whitening scale per task.
    pub d: DVector<f64>,
    /// Common noise level after whitening.
    pub c: f64,
    pub task_vals: DVector<f64>,
    pub task_vecs: DMatrix<f64>,
    pub latent_vals: DVector<f64>,
    pub latent_vecs: DMatrix<f64>,
    /// `1 / (λ̂_p λ_q + c)` as an `N × M` matrix (row `q`, column `p`).
    pub inv_spectrum: DMatrix<f64>,
}

impl KronSystem {
    pub fn new(kf: &DMatrix<f64>, kx: &DMatrix<f64>, noise: &[f64]) -> Result<Self> {
        let m = kf.nrows();
        if noise.len() != m {
            return Err(Error::Dimension(format!("{} noise variances for {m} tasks", noise.len())));
        }
        let shared = noise.iter().all(|&s| s == noise[0]);
        let (d, c) = if shared {
            (DVector::from_element(m, 1.0), noise[0])
        } else {
            if noise.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Validation("per-task noise variances must be positive".into()));
            }
            let mean = noise.iter().sum::<f64>() / m as f64;
            (DVector::from_iterator(m, noise.iter().map(|s| (s / mean).sqrt())), mean)
        };
        let kf_hat = DMatrix::from_fn(m, m, |i, j| kf[(i, j)] / (d[i] * d[j]));
        let (task_vals, task_vecs) = sym_eig(&kf_hat);
        let (latent_vals, latent_vecs) = sym_eig(kx);
        let n = kx.nrows();
        let mut inv_spectrum = DMatrix::zeros(n, m);
        for q in 0..n {
            for p in 0..m {
                let e = task_vals[p] * latent_vals[q] + c;
                if !(e > 0.0) || !e.is_finite() {
                    return Err(Error::Numerical(format!(
                        "multitask covariance is not positive definite (eigenvalue {e:.3e}; condition numbers: task {:.3e}, latent {:.3e})",
                        condition_number(kf),
                        condition_number(kx)
                    )));
                }
                inv_spectrum[(q, p)] = 1.0 / e;
            }
        }
        Ok(Self { d, c, task_vals, task_vecs, latent_vals, latent_vecs, inv_spectrum })
    }

    pub fn tasks(&self) -> usize {
        self.d.len()
    }

    pub fn points(&self) -> usize {
        self.latent_vals.len()
    }

    /// `D⁻¹Û`, so that `K⁻¹ = (W ⊗ U) Δ⁻¹ (W ⊗ U)ᵀ`.
    pub fn whitened_task_vecs(&self) -> DMatrix<f64> {
        let m = self.tasks();
        DMatrix::from_fn(m, m, |i, p| self.task_vecs[(i, p)] / self.d[i])
    }

    pub fn log_det(&self) -> f64 {
        let n = self.points() as f64;
        2.0 * n * self.d.iter().map(|x| x.ln()).sum::<f64>() - self.inv_spectrum.iter().map(|x| x.ln()).sum::<f64>()
    }

    /// `K⁻¹ vec(Y)` for an `N × M` matrix `Y`, returned as an `N × M` matrix.
    pub fn solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.whitened_task_vecs();
        let mut z = self.latent_vecs.transpose() * y * &w;
        z.component_mul_assign(&self.inv_spectrum);
        &self.latent_vecs * z * w.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::kron;

    fn dense(kf: &DMatrix<f64>, kx: &DMatrix<f64>, noise: &[f64]) -> DMatrix<f64> {
        let n = kx.nrows();
        let mut k = kron(kf, kx);
        for (t, s) in noise.iter().enumerate() {
            for i in 0..n {
                k[(t * n + i, t * n + i)] += s;
            }
        }
        k
    }

    #[test]
    fn matches_dense_with_per_task_noise() {
        let kf = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let kx = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.1, 0.5, 1.0, 0.4, 0.1, 0.4, 1.0]);
        for noise in [vec![0.1, 0.1], vec![0.05, 0.2]] {
            let sys = KronSystem::new(&kf, &kx, &noise).unwrap();
            let k = dense(&kf, &kx, &noise);
            let y = DMatrix::from_row_slice(3, 2, &[0.3, -1.0, 0.2, 0.4, -0.7, 0.9]);
            let solved = sys.solve(&y);
            let direct = k.clone().lu().solve(&DVector::from_column_slice(y.as_slice())).unwrap();
            assert!((DVector::from_column_slice(solved.as_slice()) - direct).norm() < 1e-12);
            assert!((sys.log_det() - k.determinant().ln()).abs() < 1e-12);
        }
    }
}
