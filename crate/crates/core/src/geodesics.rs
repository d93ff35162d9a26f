//! Shortest curves in a latent space under a Riemannian metric: grid-graph
//! Dijkstra and cubic-spline energy minimization.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lvm::LatentModel;
use crate::manifolds::ManifoldPoint;
use crate::optim::Adam;
use crate::pullback::{Bounds, MetricField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicCurve {
    /// Ordered latent points.
    pub samples: Vec<Vec<f64>>,
    /// Riemannian length of each segment.
    pub lengths: Vec<f64>,
    pub total_length: f64,
    pub energy: f64,
    pub solver: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

impl GeodesicCurve {
    pub fn from_samples(metric: &dyn MetricField, samples: Vec<Vec<f64>>, solver: &str) -> Result<Self> {
        let lengths = segment_lengths(metric, &samples)?;
        let total_length = lengths.iter().sum();
        let energy = curve_energy(metric, &samples)?;
        Ok(Self { samples, lengths, total_length, energy, solver: solver.to_string(), grad_norm: None })
    }

    pub fn csv_header(&self) -> Vec<String> {
        let q = self.samples.first().map_or(0, |s| s.len());
        std::iter::once("t".to_string()).chain((1..=q).map(|i| format!("x{i}"))).collect()
    }

    /// Rows `t, x1, …, xQ` with `t` the normalized sample index.
    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        let t = self.samples.len();
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ti = if t > 1 { i as f64 / (t - 1) as f64 } else { 0.0 };
                std::iter::once(ti).chain(s.iter().copied()).collect()
            })
            .collect()
    }
}

fn check_dim(metric: &dyn MetricField, p: &[f64], what: &str) -> Result<()> {
    if p.len() != metric.dim() {
        return Err(Error::Dimension(format!("{what} has {} coordinates, metric has {}", p.len(), metric.dim())));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} must be finite")));
    }
    Ok(())
}

/// `√(Δᵀ G(midpoint) Δ)` for the segment from `a` to `b`.
fn segment_length(metric: &dyn MetricField, a: &[f64], b: &[f64]) -> Result<f64> {
    let (mid, delta) = midpoint_delta(a, b);
    let g = metric.metric(mid.as_slice())?;
    Ok(g.quadratic_form(&delta).max(0.0).sqrt())
}

fn midpoint_delta(a: &[f64], b: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let mid = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
    let delta = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| y - x));
    (mid, delta)
}

trait QuadraticForm {
    fn quadratic_form(&self, v: &DVector<f64>) -> f64;
}

impl QuadraticForm for DMatrix<f64> {
    fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * self * v)[(0, 0)]
    }
}

pub fn segment_lengths(metric: &dyn MetricField, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    for s in samples {
        check_dim(metric, s, "curve sample")?;
    }
    samples.windows(2).map(|w| segment_length(metric, &w[0], &w[1])).collect()
}

/// Midpoint-rule Riemannian length of a sampled curve.
pub fn curve_length(metric: &dyn MetricField, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Validation("curve length needs at least two samples".into()));
    }
    Ok(segment_lengths(metric, samples)?.iter().sum())
}

/// Discrete energy `Σ_t Δ_tᵀ G(γ̄_t) Δ_t / Δt` with `Δt = 1 / (T − 1)`.
pub fn curve_energy(metric: &dyn MetricField, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Ok(0.0);
    }
    let dt = 1.0 / (samples.len() - 1) as f64;
    Ok(segment_lengths(metric, samples)?.iter().map(|l| l * l / dt).sum())
}

/// The chord from `start` to `end` sampled at `n` evenly spaced points.
pub fn straight_line(metric: &dyn MetricField, start: &[f64], end: &[f64], n: usize) -> Result<GeodesicCurve> {
    check_dim(metric, start, "start")?;
    check_dim(metric, end, "end")?;
    let n = n.max(2);
    let mut samples: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            start.iter().zip(end).map(|(a, b)| a + t * (b - a)).collect()
        })
        .collect();
    samples[0] = start.to_vec();
    samples[n - 1] = end.to_vec();
    GeodesicCurve::from_samples(metric, samples, "straight")
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    // Reversed so that BinaryHeap pops the smallest (distance, node) pair first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 8-connected grid over a 2-D box with metric edge weights.
#[derive(Clone, Debug)]
pub struct GridGraph {
    bounds: Bounds,
    resolution: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl GridGraph {
    pub fn build(metric: &dyn MetricField, bounds: Bounds, resolution: usize) -> Result<Self> {
        if metric.dim() != 2 {
            return Err(Error::Unsupported(format!("graph geodesics need a 2-D latent space, got {}", metric.dim())));
        }
        bounds.validate()?;
        if resolution < 2 {
            return Err(Error::Validation("graph resolution must be at least 2".into()));
        }
        let xs = bounds.axis(0, resolution);
        let ys = bounds.axis(1, resolution);
        let r = resolution;
        let mut edges = Vec::new();
        for j in 0..r {
            for i in 0..r {
                let a = j * r + i;
                for (di, dj) in [(1i64, 0i64), (0, 1), (1, 1), (-1, 1)] {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni >= 0 && (ni as usize) < r && (nj as usize) < r {
                        edges.push((a, nj as usize * r + ni as usize));
                    }
                }
            }
        }
        let coord = |n: usize| [xs[n % r], ys[n / r]];
        let weights =
            edges.par_iter().map(|&(a, b)| segment_length(metric, &coord(a), &coord(b))).collect::<Result<Vec<_>>>()?;
        let mut adjacency = vec![Vec::new(); r * r];
        for (&(a, b), &w) in edges.iter().zip(&weights) {
            if !w.is_finite() {
                return Err(Error::Numerical(format!("non-finite edge weight between grid nodes {a} and {b}")));
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(n, _)| n);
        }
        Ok(Self { bounds, resolution, xs, ys, adjacency })
    }

    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        vec![self.xs[node % self.resolution], self.ys[node / self.resolution]]
    }

    /// Nearest grid node to `p`.
    pub fn snap(&self, p: &[f64]) -> usize {
        let idx = |k: usize, v: f64| {
            let span = self.bounds.max[k] - self.bounds.min[k];
            let f = (v - self.bounds.min[k]) / span * (self.resolution - 1) as f64;
            (f.round().max(0.0) as usize).min(self.resolution - 1)
        };
        idx(1, p[1]) * self.resolution + idx(0, p[0])
    }

    /// Dijkstra node sequence between two nodes; ties resolve toward smaller node indices.
    pub fn node_path(&self, from: usize, to: usize) -> Vec<usize> {
        let n = self.adjacency.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: from });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            if node == to {
                break;
            }
            for &(next, w) in &self.adjacency[node] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    prev[next] = node;
                    heap.push(HeapEntry { dist: nd, node: next });
                }
            }
        }
        let mut path = vec![to];
        while *path.last().unwrap() != from {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        path
    }

    pub fn shortest_path(&self, metric: &dyn MetricField, start: &[f64], end: &[f64]) -> Result<GeodesicCurve> {
        check_dim(metric, start, "start")?;
        check_dim(metric, end, "end")?;
        if !self.bounds.contains(start) || !self.bounds.contains(end) {
            return Err(Error::Validation("geodesic endpoints must lie inside the grid bounds".into()));
        }
        if start == end {
            return Ok(GeodesicCurve {
                samples: vec![start.to_vec()],
                lengths: vec![],
                total_length: 0.0,
                energy: 0.0,
                solver: "graph".into(),
                grad_norm: None,
            });
        }
        let nodes = self.node_path(self.snap(start), self.snap(end));
        let mut samples: Vec<Vec<f64>> = nodes.iter().map(|&n| self.node_coords(n)).collect();
        if samples[0] != start {
            samples.insert(0, start.to_vec());
        }
        if samples.last().map(|s| s.as_slice()) != Some(end) {
            samples.push(end.to_vec());
        }
        GeodesicCurve::from_samples(metric, samples, "graph")
    }
}

/// Builds a `resolution × resolution` graph and returns its shortest path.
pub fn graph_geodesic(
    metric: &dyn MetricField,
    start: &[f64],
    end: &[f64],
    bounds: Bounds,
    resolution: usize,
) -> Result<GeodesicCurve> {
    GridGraph::build(metric, bounds, resolution)?.shortest_path(metric, start, end)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    /// Interior control points.
    pub n_control: usize,
    /// Quadrature segments.
    pub segments: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Finite-difference step for metric derivatives.
    pub fd_step: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self { n_control: 8, segments: 100, iterations: 500, learning_rate: 0.05, fd_step: 1e-4 }
    }
}

/// `(T+1) × K` matrix mapping values at `K` uniform knots on `[0, 1]` to a
/// natural cubic spline sampled at `T + 1` uniform points.
fn natural_spline_matrix(knots: usize, segments: usize) -> DMatrix<f64> {
    let k = knots;
    let h = 1.0 / (k - 1) as f64;
    let mut out = DMatrix::zeros(segments + 1, k);
    for unit in 0..k {
        let y: Vec<f64> = (0..k).map(|i| if i == unit { 1.0 } else { 0.0 }).collect();
        // Second derivatives with M_0 = M_{K−1} = 0 (Thomas algorithm).
        let mut m2 = vec![0.0; k];
        if k > 2 {
            let inner = k - 2;
            let rhs: Vec<f64> = (1..k - 1).map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h)).collect();
            let mut c = vec![0.0; inner];
            let mut d = vec![0.0; inner];
            for i in 0..inner {
                let (a, b, cc) = (if i > 0 { 1.0 } else { 0.0 }, 4.0, 1.0);
                let denom = b - a * if i > 0 { c[i - 1] } else { 0.0 };
                c[i] = cc / denom;
                d[i] = (rhs[i] - a * if i > 0 { d[i - 1] } else { 0.0 }) / denom;
            }
            for i in (0..inner).rev() {
                m2[i + 1] = d[i] - if i + 1 < inner { c[i] * m2[i + 2] } else { 0.0 };
            }
        }
        for s in 0..=segments {
            let t = s as f64 / segments as f64;
            let seg = ((t / h).floor() as usize).min(k - 2);
            let (t0, t1) = (seg as f64 * h, (seg + 1) as f64 * h);
            let (a, b) = ((t1 - t) / h, (t - t0) / h);
            out[(s, unit)] =
                a * y[seg] + b * y[seg + 1] + ((a * a * a - a) * m2[seg] + (b * b * b - b) * m2[seg + 1]) * h * h / 6.0;
        }
    }
    out
}

struct SplineProblem<'a> {
    metric: &'a dyn MetricField,
    basis: DMatrix<f64>,
    start: DVector<f64>,
    end: DVector<f64>,
    config: SplineConfig,
}

impl SplineProblem<'_> {
    fn samples(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.basis.ncols();
        let mut knots = DMatrix::zeros(k, self.start.len());
        knots.row_mut(0).copy_from(&self.start.transpose());
        knots.rows_mut(1, k - 2).copy_from(z);
        knots.row_mut(k - 1).copy_from(&self.end.transpose());
        let mut s = &self.basis * knots;
        let last = s.nrows() - 1;
        s.row_mut(0).copy_from(&self.start.transpose());
        s.row_mut(last).copy_from(&self.end.transpose());
        s
    }

    fn energy_and_gradient(&self, z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let g = self.samples(z);
        let (t, q) = (g.nrows() - 1, g.ncols());
        let dt = 1.0 / t as f64;
        let h = self.config.fd_step;
        let per_segment = (0..t)
            .into_par_iter()
            .map(|s| {
                let a: Vec<f64> = g.row(s).iter().copied().collect();
                let b: Vec<f64> = g.row(s + 1).iter().copied().collect();
                let (mid, delta) = midpoint_delta(&a, &b);
                let gm = self.metric.metric(mid.as_slice())?;
                let e = gm.quadratic_form(&delta) / dt;
                let d_delta = (&gm + gm.transpose()) * &delta / dt;
                let mut d_mid = DVector::zeros(q);
                for r in 0..q {
                    let mut p = mid.clone();
                    let mut m = mid.clone();
                    p[r] += h;
                    m[r] -= h;
                    let dg = (self.metric.metric(p.as_slice())? - self.metric.metric(m.as_slice())?) / (2.0 * h);
                    d_mid[r] = dg.quadratic_form(&delta) / dt;
                }
                Ok((e, d_delta, d_mid))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut energy = 0.0;
        let mut d_samples = DMatrix::zeros(t + 1, q);
        for (s, (e, d_delta, d_mid)) in per_segment.iter().enumerate() {
            energy += e;
            for r in 0..q {
                d_samples[(s + 1, r)] += d_delta[r] + 0.5 * d_mid[r];
                d_samples[(s, r)] += -d_delta[r] + 0.5 * d_mid[r];
            }
        }
        let k = self.basis.ncols();
        let dz = self.basis.columns(1, k - 2).transpose() * d_samples;
        Ok((energy, dz))
    }
}

/// Minimizes the discrete curve energy over the interior control points of a
/// natural cubic spline with fixed endpoints, starting from the chord.
pub fn spline_geodesic(
    metric: &dyn MetricField,
    start: &[f64],
    end: &[f64],
    config: SplineConfig,
) -> Result<GeodesicCurve> {
    check_dim(metric, start, "start")?;
    check_dim(metric, end, "end")?;
    if config.n_control == 0 || config.segments < 2 {
        return Err(Error::Validation("spline needs at least one control point and two segments".into()));
    }
    let q = start.len();
    let k = config.n_control + 2;
    let problem = SplineProblem {
        metric,
        basis: natural_spline_matrix(k, config.segments),
        start: DVector::from_column_slice(start),
        end: DVector::from_column_slice(end),
        config,
    };
    let mut z = DMatrix::from_fn(config.n_control, q, |i, r| {
        let t = (i + 1) as f64 / (k - 1) as f64;
        start[r] + t * (end[r] - start[r])
    });
    let mut best = (f64::INFINITY, z.clone(), f64::NAN);
    let mut adam = Adam::new(z.len(), config.learning_rate);
    for it in 0..=config.iterations {
        let (e, dz) = problem.energy_and_gradient(&z)?;
        if !e.is_finite() || dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("curve energy became non-finite at iteration {it}")));
        }
        if e < best.0 {
            best = (e, z.clone(), dz.norm());
        }
        if it == config.iterations {
            break;
        }
        adam.step(z.as_mut_slice(), dz.as_slice());
    }
    let s = problem.samples(&best.1);
    let samples = (0..s.nrows()).map(|i| s.row(i).iter().copied().collect()).collect();
    let mut curve = GeodesicCurve::from_samples(metric, samples, "spline")?;
    curve.grad_norm = Some(best.2);
    Ok(curve)
}

pub fn decode_curve(model: &LatentModel, curve: &GeodesicCurve) -> Result<Vec<ManifoldPoint>> {
    curve.samples.iter().map(|x| model.decode(x)).collect()
}

/// Resamples a polyline to `n` points evenly spaced in Euclidean arc length.
pub fn resample_uniform(samples: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    if samples.len() < 2 || n < 2 {
        return vec![samples[0].clone(); n.max(1)];
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut cum = vec![0.0];
    for w in samples.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![samples[0].clone(); n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let f = if span > 0.0 { ((target - cum[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(samples[seg].iter().zip(&samples[seg + 1]).map(|(a, b)| a + f * (b - a)).collect());
    }
    out[0] = samples[0].clone();
    out[n - 1] = samples[samples.len() - 1].clone();
    out
}
