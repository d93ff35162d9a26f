//! Independent reference computations shared by the integration tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wrapped_lvm::lvm::{Dataset, MapObjective};
use wrapped_lvm::manifolds::ManifoldSpec;

/// Every simple path between two nodes, by depth-first enumeration.
pub fn all_simple_paths(adj: &[Vec<usize>], from: usize, to: usize) -> Vec<Vec<usize>> {
    fn walk(adj: &[Vec<usize>], path: &mut Vec<usize>, to: usize, out: &mut Vec<Vec<usize>>) {
        let last = *path.last().unwrap();
        if last == to {
            out.push(path.clone());
            return;
        }
        for &n in &adj[last] {
            if !path.contains(&n) {
                path.push(n);
                walk(adj, path, to, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(adj, &mut vec![from], to, &mut out);
    out
}

/// 8-neighbour adjacency of a `res × res` grid with column-major node ids `i + res·j`.
pub fn grid_adjacency(res: usize) -> Vec<Vec<usize>> {
    let n = res * res;
    let r = res as i64;
    let mut adj = vec![Vec::new(); n];
    for (a, list) in adj.iter_mut().enumerate() {
        for b in 0..n {
            let (ai, aj, bi, bj) = (a as i64 % r, a as i64 / r, b as i64 % r, b as i64 / r);
            if a != b && (ai - bi).abs() <= 1 && (aj - bj).abs() <= 1 {
                list.push(b);
            }
        }
    }
    adj
}

pub fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let e = s.clone().symmetric_eigen();
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * DMatrix::from_diagonal(&d)
}

/// `E[A Ǧ Aᵀ]` for `A ~ MN(mean, row, col)` by sampling.
pub fn monte_carlo_metric(
    mean: &DMatrix<f64>,
    row: &DMatrix<f64>,
    col: &DMatrix<f64>,
    g: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = psd_sqrt(row);
    let lc = psd_sqrt(col);
    let (q, m) = mean.shape();
    let mut acc = DMatrix::zeros(q, q);
    for _ in 0..n {
        let z = DMatrix::from_fn(q, m, |_, _| StandardNormal.sample(&mut rng));
        let a = mean + &lr * z * lc.transpose();
        acc += &a * g * a.transpose();
    }
    acc / n as f64
}

/// Relative L2 error of the analytic gradient against central differences.
pub fn fd_gradient_error(obj: &MapObjective, p: &[f64]) -> f64 {
    let (_, g) = obj.value_and_gradient(p).unwrap();
    let h = 1e-5;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[i] += h;
        b[i] -= h;
        let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h);
        num += (fd - g[i]).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

/// Smooth two-trajectory dataset built from the default basepoint.
pub fn wavy_dataset(spec: &ManifoldSpec, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = spec.default_basepoint();
    let mut points = Vec::new();
    for i in 0..n {
        let t = i as f64 / n as f64;
        let c: Vec<f64> = (0..spec.intrinsic_dim())
            .map(|k| 0.6 * (3.0 * t + k as f64).sin() + 0.05 * rng.random_range(-1.0..1.0))
            .collect();
        points.push(spec.exp(&base, &c).unwrap());
    }
    let ids = (0..n).map(|i| i * 2 / n).collect();
    Dataset::new(spec.clone(), points, ids).unwrap()
}
