//! Per-case checks of the manifold laws, each returning the worst deviation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use wrapped_lvm::manifolds::{vec_sym, ManifoldSpec};

pub fn law_specs() -> Vec<(&'static str, ManifoldSpec)> {
    vec![
        ("S2", ManifoldSpec::Sphere { dim: 2 }),
        ("S3", ManifoldSpec::Sphere { dim: 3 }),
        ("SPD(2)", ManifoldSpec::Spd { size: 2 }),
        ("SPD(3)", ManifoldSpec::Spd { size: 3 }),
        (
            "R2xS2",
            ManifoldSpec::Product {
                components: vec![ManifoldSpec::Euclidean { dim: 2 }, ManifoldSpec::Sphere { dim: 2 }],
            },
        ),
        (
            "S2xSPD(2)",
            ManifoldSpec::Product { components: vec![ManifoldSpec::Sphere { dim: 2 }, ManifoldSpec::Spd { size: 2 }] },
        ),
    ]
}

/// Tangent coefficients with a uniformly drawn norm in `[0, max_norm)`.
pub fn random_tangent<R: Rng>(rng: &mut R, dim: usize, max_norm: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let r = rng.random_range(0.0..max_norm);
    g.iter().map(|v| v * r / n).collect()
}

/// Tangent norm cap for round trips; spheres need `‖v‖ < π`.
pub fn roundtrip_norm(spec: &ManifoldSpec) -> f64 {
    let spheres = spec.factors().iter().any(|f| matches!(f.spec, ManifoldSpec::Sphere { .. }));
    if spheres {
        3.0
    } else {
        2.0
    }
}

pub fn roundtrip_error(spec: &ManifoldSpec, base: &[f64], v: &[f64]) -> f64 {
    let y = spec.exp(base, v).unwrap();
    let back = spec.log(base, &y).unwrap();
    back.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `(‖BᵀB − I‖_max, worst tangency violation)`.
pub fn basis_errors(spec: &ManifoldSpec, base: &[f64]) -> (f64, f64) {
    let b = spec.basis(base).unwrap();
    let n = b.ncols();
    let ortho = (b.transpose() * &b - DMatrix::identity(n, n)).abs().max();
    let mut tangency: f64 = 0.0;
    for f in spec.factors() {
        let block = b.view((f.ambient.start, f.intrinsic.start), (f.ambient.len(), f.intrinsic.len()));
        match f.spec {
            ManifoldSpec::Sphere { .. } => {
                let p = DVector::from_column_slice(&base[f.ambient.clone()]);
                tangency = tangency.max((block.transpose() * p).abs().max());
            }
            ManifoldSpec::Spd { size } => {
                for col in block.column_iter() {
                    let m = DMatrix::from_row_slice(*size, *size, col.as_slice());
                    tangency = tangency.max((&m - m.transpose()).abs().max());
                }
            }
            _ => {}
        }
    }
    (ortho, tangency)
}

pub fn random_symmetric<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

pub fn isometry_error(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let lhs: f64 = vec_sym(u).iter().zip(vec_sym(v)).map(|(a, b)| a * b).sum();
    (lhs - (u * v).trace()).abs()
}

/// `(|d(a,b) − d(b,a)|, d(a,a), max(0, d(a,c) − d(a,b) − d(b,c)))`.
pub fn distance_errors(spec: &ManifoldSpec, a: &[f64], b: &[f64], c: &[f64]) -> (f64, f64, f64) {
    let d = |x: &[f64], y: &[f64]| spec.distance(x, y).unwrap();
    let sym = (d(a, b) - d(b, a)).abs();
    let zero = d(a, a).abs();
    let tri = (d(a, c) - d(a, b) - d(b, c)).max(0.0);
    (sym, zero, tri)
}

/// `log|det|` of the central-difference Jacobian of `v ↦ Bᵀ_{Exp(v)} Exp(v)` in
/// the frame at the image point.
pub fn fd_log_det(spec: &ManifoldSpec, base: &[f64], v: &[f64], h: f64) -> f64 {
    let y = spec.exp(base, v).unwrap();
    let frame = spec.basis(&y).unwrap();
    let m = v.len();
    let mut jac = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut plus = v.to_vec();
        let mut minus = v.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let diff =
            DVector::from_vec(spec.exp(base, &plus).unwrap()) - DVector::from_vec(spec.exp(base, &minus).unwrap());
        jac.set_column(j, &(frame.transpose() * diff / (2.0 * h)));
    }
    jac.determinant().abs().ln()
}

pub fn cov_log_det_error(spec: &ManifoldSpec, base: &[f64], v: &[f64]) -> f64 {
    (spec.cov_log_det(base, v).unwrap() - fd_log_det(spec, base, v, 1e-5)).abs()
}
