//! Riemannian manifold primitives: spheres, SPD matrices with the affine-invariant
//! metric, Euclidean spaces and their products.
//!
//! Points are stored by their ambient coordinates (SPD matrices row-major).
//! Tangent vectors are stored as coefficients in an orthonormal frame of the
//! tangent space at a basepoint, so a tangent vector of `S^M` has `M` entries
//! and one of `SPD(M)` has `M(M+1)/2` entries.
//!
//! The SPD frame is `{E_ii} ∪ {(E_ij + E_ji)/√2, i < j}`: coefficient inner
//! products equal Frobenius inner products of the symmetric matrices.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{exp_divided_difference, ln_exp_divided_difference, sym_apply, sym_eig, symmetrize};

/// Tolerance used when validating stored points.
pub const POINT_TOL: f64 = 1e-9;

/// Below this sine of the half-angle the S² frame permutes coordinates.
const S2_DEGENERATE_Z: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldSpec {
    Euclidean {
        dim: usize,
    },
    /// Unit sphere `S^dim` embedded in `R^{dim+1}`.
    Sphere {
        dim: usize,
    },
    /// Symmetric positive-definite `size × size` matrices.
    Spd {
        size: usize,
    },
    Product {
        components: Vec<ManifoldSpec>,
    },
}

/// A non-product factor of a spec with its offsets into the ambient and
/// intrinsic coordinate vectors of the full spec.
#[derive(Clone, Debug)]
pub struct Factor<'a> {
    pub spec: &'a ManifoldSpec,
    pub ambient: std::ops::Range<usize>,
    pub intrinsic: std::ops::Range<usize>,
}

impl ManifoldSpec {
    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean { dim } => *dim,
            ManifoldSpec::Sphere { dim } => dim + 1,
            ManifoldSpec::Spd { size } => size * size,
            ManifoldSpec::Product { components } => components.iter().map(|c| c.ambient_dim()).sum(),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean { dim } => *dim,
            ManifoldSpec::Sphere { dim } => *dim,
            ManifoldSpec::Spd { size } => size * (size + 1) / 2,
            ManifoldSpec::Product { components } => components.iter().map(|c| c.intrinsic_dim()).sum(),
        }
    }

    /// Euclidean space with the same ambient dimension; used by manifold-unaware baselines.
    pub fn ambient_euclidean(&self) -> ManifoldSpec {
        ManifoldSpec::Euclidean { dim: self.ambient_dim() }
    }

    pub fn is_euclidean(&self) -> bool {
        self.factors().iter().all(|f| matches!(f.spec, ManifoldSpec::Euclidean { .. }))
    }

    /// Flattened list of non-product factors.
    pub fn factors(&self) -> Vec<Factor<'_>> {
        let mut out = Vec::new();
        self.collect_factors(0, 0, &mut out);
        out
    }

    fn collect_factors<'a>(&'a self, amb: usize, intr: usize, out: &mut Vec<Factor<'a>>) -> (usize, usize) {
        match self {
            ManifoldSpec::Product { components } => {
                let (mut a, mut i) = (amb, intr);
                for c in components {
                    let (na, ni) = c.collect_factors(a, i, out);
                    a = na;
                    i = ni;
                }
                (a, i)
            }
            simple => {
                let (na, ni) = (amb + simple.ambient_dim(), intr + simple.intrinsic_dim());
                out.push(Factor { spec: simple, ambient: amb..na, intrinsic: intr..ni });
                (na, ni)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ManifoldSpec::Euclidean { dim } | ManifoldSpec::Sphere { dim } if *dim == 0 => {
                Err(Error::Validation("manifold dimension must be positive".into()))
            }
            ManifoldSpec::Spd { size: 0 } => Err(Error::Validation("SPD size must be positive".into())),
            ManifoldSpec::Product { components } if components.is_empty() => {
                Err(Error::Validation("product manifold needs at least one component".into()))
            }
            ManifoldSpec::Product { components } => components.iter().try_for_each(|c| c.validate()),
            _ => Ok(()),
        }
    }

    /// Constant basepoint: origin, `(1, 0, …, 0)` on spheres, identity on SPD.
    pub fn default_basepoint(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for f in self.factors() {
            match f.spec {
                ManifoldSpec::Sphere { .. } => out[f.ambient.start] = 1.0,
                ManifoldSpec::Spd { size } => {
                    for i in 0..*size {
                        out[f.ambient.start + i * size + i] = 1.0;
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn check_len(&self, what: &str, v: &[f64], expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Dimension(format!("{what} has {} entries, {expected} expected for {self:?}", v.len())));
        }
        Ok(())
    }

    /// Validates ambient coordinates against the manifold constraints.
    pub fn check_point(&self, coords: &[f64], tol: f64) -> Result<()> {
        self.check_len("point", coords, self.ambient_dim())?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("point has non-finite coordinates".into()));
        }
        for f in self.factors() {
            let x = &coords[f.ambient.clone()];
            match f.spec {
                ManifoldSpec::Sphere { .. } => {
                    let n = norm(x);
                    if (n - 1.0).abs() > tol {
                        return Err(Error::Validation(format!("sphere point has norm {n}")));
                    }
                }
                ManifoldSpec::Spd { size } => {
                    let m = DMatrix::from_row_slice(*size, *size, x);
                    let asym = (&m - m.transpose()).abs().max();
                    if asym > tol {
                        return Err(Error::Validation(format!("SPD point not symmetric (deviation {asym:e})")));
                    }
                    let lo = sym_eig(&m).0[0];
                    if lo <= 0.0 {
                        return Err(Error::Validation(format!("SPD point has eigenvalue {lo:e}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Orthonormal frame of the tangent space at `base`, `ambient_dim × intrinsic_dim`.
    pub fn basis(&self, base: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len("basepoint", base, self.ambient_dim())?;
        let mut out = DMatrix::zeros(self.ambient_dim(), self.intrinsic_dim());
        for f in self.factors() {
            let block = factor_basis(f.spec, &base[f.ambient.clone()]);
            out.view_mut((f.ambient.start, f.intrinsic.start), (f.ambient.len(), f.intrinsic.len())).copy_from(&block);
        }
        Ok(out)
    }

    /// Exponential map with the tangent vector given in frame coefficients.
    pub fn exp(&self, base: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_len("basepoint", base, self.ambient_dim())?;
        self.check_len("tangent coefficients", coeffs, self.intrinsic_dim())?;
        let mut out = vec![0.0; self.ambient_dim()];
        for f in self.factors() {
            let y = factor_exp(f.spec, &base[f.ambient.clone()], &coeffs[f.intrinsic.clone()])?;
            out[f.ambient.clone()].copy_from_slice(&y);
        }
        Ok(out)
    }

    /// Logarithmic map returning frame coefficients at `base`.
    pub fn log(&self, base: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        self.check_len("basepoint", base, self.ambient_dim())?;
        self.check_len("point", q, self.ambient_dim())?;
        let mut out = vec![0.0; self.intrinsic_dim()];
        for f in self.factors() {
            let v = factor_log(f.spec, &base[f.ambient.clone()], &q[f.ambient.clone()])?;
            out[f.intrinsic.clone()].copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Geodesic distance; product components combine as a root sum of squares.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_len("point", a, self.ambient_dim())?;
        self.check_len("point", b, self.ambient_dim())?;
        let mut sq = 0.0;
        for f in self.factors() {
            let d = factor_distance(f.spec, &a[f.ambient.clone()], &b[f.ambient.clone()])?;
            sq += d * d;
        }
        Ok(sq.sqrt())
    }

    /// `log |det ∂Exp_base(v)/∂v|` in frame coordinates.
    pub fn cov_log_det(&self, base: &[f64], coeffs: &[f64]) -> Result<f64> {
        self.check_len("basepoint", base, self.ambient_dim())?;
        self.check_len("tangent coefficients", coeffs, self.intrinsic_dim())?;
        let mut total = 0.0;
        for f in self.factors() {
            total += factor_cov_log_det(f.spec, &base[f.ambient.clone()], &coeffs[f.intrinsic.clone()])?;
        }
        Ok(total)
    }

    /// Analytic differential of `coeffs ↦ Exp_base(B coeffs)` in ambient coordinates,
    /// `ambient_dim × intrinsic_dim`.
    pub fn exp_differential(&self, base: &[f64], coeffs: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len("basepoint", base, self.ambient_dim())?;
        self.check_len("tangent coefficients", coeffs, self.intrinsic_dim())?;
        let mut out = DMatrix::zeros(self.ambient_dim(), self.intrinsic_dim());
        for f in self.factors() {
            let block = factor_exp_differential(f.spec, &base[f.ambient.clone()], &coeffs[f.intrinsic.clone()]);
            out.view_mut((f.ambient.start, f.intrinsic.start), (f.ambient.len(), f.intrinsic.len())).copy_from(&block);
        }
        Ok(out)
    }

    /// Gram matrix of the Riemannian metric at `point`, expressed in the frame
    /// returned by [`ManifoldSpec::basis`] at that point.
    pub fn metric_gram(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len("point", point, self.ambient_dim())?;
        let mut out = DMatrix::zeros(self.intrinsic_dim(), self.intrinsic_dim());
        for f in self.factors() {
            let n = f.intrinsic.len();
            let block = match f.spec {
                ManifoldSpec::Spd { size } => spd_metric_gram(*size, &point[f.ambient.clone()])?,
                _ => DMatrix::identity(n, n),
            };
            out.view_mut((f.intrinsic.start, f.intrinsic.start), (n, n)).copy_from(&block);
        }
        Ok(out)
    }

    /// Random point: Gaussian on Euclidean factors, uniform on spheres and
    /// `Exp_I` of a Gaussian symmetric matrix with standard deviation `spread` on SPD.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R, spread: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for f in self.factors() {
            let x = &mut out[f.ambient.clone()];
            match f.spec {
                ManifoldSpec::Euclidean { .. } => {
                    x.iter_mut().for_each(|v| *v = spread * rng.sample::<f64, _>(StandardNormal))
                }
                ManifoldSpec::Sphere { .. } => {
                    x.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
                    let n = norm(x);
                    x.iter_mut().for_each(|v| *v /= n);
                }
                ManifoldSpec::Spd { size } => {
                    let c: Vec<f64> =
                        (0..f.intrinsic.len()).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
                    let m = sym_apply(&unvec_sym(*size, &c), f64::exp);
                    x.copy_from_slice(&to_row_major(&m));
                }
                ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
            }
        }
        out
    }
}

/// A point on a manifold stored by its ambient coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub spec: ManifoldSpec,
    pub coords: Vec<f64>,
}

impl ManifoldPoint {
    pub fn new(spec: ManifoldSpec, coords: Vec<f64>) -> Result<Self> {
        spec.check_point(&coords, POINT_TOL)?;
        Ok(Self { spec, coords })
    }

    pub fn basepoint(spec: &ManifoldSpec) -> Self {
        Self { spec: spec.clone(), coords: spec.default_basepoint() }
    }
}

/// Tangent vector at `basepoint` in the coefficients of the orthonormal frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentCoords {
    pub basepoint: ManifoldPoint,
    pub coeffs: Vec<f64>,
}

impl TangentCoords {
    pub fn new(basepoint: ManifoldPoint, coeffs: Vec<f64>) -> Result<Self> {
        basepoint.spec.check_len("tangent coefficients", &coeffs, basepoint.spec.intrinsic_dim())?;
        Ok(Self { basepoint, coeffs })
    }

    pub fn zero(basepoint: ManifoldPoint) -> Self {
        let n = basepoint.spec.intrinsic_dim();
        Self { basepoint, coeffs: vec![0.0; n] }
    }

    /// Expresses an ambient tangent vector in the frame at `basepoint`.
    pub fn from_ambient(basepoint: ManifoldPoint, ambient: &[f64]) -> Result<Self> {
        let basis = basepoint.spec.basis(&basepoint.coords)?;
        basepoint.spec.check_len("ambient tangent", ambient, basis.nrows())?;
        let coeffs = basis.transpose() * DVector::from_column_slice(ambient);
        Ok(Self { basepoint, coeffs: coeffs.as_slice().to_vec() })
    }

    pub fn to_ambient(&self) -> Result<Vec<f64>> {
        let basis = self.basepoint.spec.basis(&self.basepoint.coords)?;
        Ok((basis * DVector::from_column_slice(&self.coeffs)).as_slice().to_vec())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coeffs)
    }
}

#[derive(Clone, Debug)]
pub struct TangentBasis {
    pub basepoint: ManifoldPoint,
    pub columns: DMatrix<f64>,
}

fn same_spec(a: &ManifoldPoint, b: &ManifoldPoint) -> Result<()> {
    if a.spec != b.spec {
        return Err(Error::Dimension(format!("spec mismatch: {:?} vs {:?}", a.spec, b.spec)));
    }
    Ok(())
}

pub fn exp_map(base: &ManifoldPoint, v: &TangentCoords) -> Result<ManifoldPoint> {
    same_spec(base, &v.basepoint)?;
    if base.coords != v.basepoint.coords {
        return Err(Error::Validation("tangent vector is attached to a different basepoint".into()));
    }
    let coords = base.spec.exp(&base.coords, &v.coeffs)?;
    Ok(ManifoldPoint { spec: base.spec.clone(), coords })
}

pub fn log_map(base: &ManifoldPoint, q: &ManifoldPoint) -> Result<TangentCoords> {
    same_spec(base, q)?;
    let coeffs = base.spec.log(&base.coords, &q.coords)?;
    Ok(TangentCoords { basepoint: base.clone(), coeffs })
}

pub fn distance(a: &ManifoldPoint, b: &ManifoldPoint) -> Result<f64> {
    same_spec(a, b)?;
    a.spec.distance(&a.coords, &b.coords)
}

pub fn tangent_basis(base: &ManifoldPoint) -> Result<TangentBasis> {
    let columns = base.spec.basis(&base.coords)?;
    Ok(TangentBasis { basepoint: base.clone(), columns })
}

pub fn cov_log_det(base: &ManifoldPoint, v: &TangentCoords) -> Result<f64> {
    same_spec(base, &v.basepoint)?;
    base.spec.cov_log_det(&base.coords, &v.coeffs)
}

/// Whether raw ambient coordinates satisfy the manifold constraints within `tol`.
///
/// Spheres: `|‖q‖ − 1| ≤ tol`. SPD: symmetry deviation `≤ tol` and minimum
/// eigenvalue `≥ tol · trace / M`.
pub fn project_check(q: &[f64], spec: &ManifoldSpec, tol: f64) -> bool {
    if q.len() != spec.ambient_dim() || q.iter().any(|v| !v.is_finite()) {
        return false;
    }
    spec.factors().iter().all(|f| {
        let x = &q[f.ambient.clone()];
        match f.spec {
            ManifoldSpec::Sphere { .. } => (norm(x) - 1.0).abs() <= tol,
            ManifoldSpec::Spd { size } => {
                let m = DMatrix::from_row_slice(*size, *size, x);
                if (&m - m.transpose()).abs().max() > tol {
                    return false;
                }
                let lo = sym_eig(&m).0[0];
                lo >= tol * m.trace() / *size as f64
            }
            _ => true,
        }
    })
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric-matrix coefficients: diagonal first, then `√2·V_ij` for `i < j` in row order.
pub fn vec_sym(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.push(m[(i, i)]);
    }
    for i in 0..n {
        for j in i + 1..n {
            out.push(SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    out
}

pub fn unvec_sym(n: usize, c: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = c[i];
    }
    let mut k = n;
    for i in 0..n {
        for j in i + 1..n {
            m[(i, j)] = c[k] / SQRT_2;
            m[(j, i)] = c[k] / SQRT_2;
            k += 1;
        }
    }
    m
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn factor_basis(spec: &ManifoldSpec, base: &[f64]) -> DMatrix<f64> {
    match spec {
        ManifoldSpec::Euclidean { dim } => DMatrix::identity(*dim, *dim),
        ManifoldSpec::Sphere { dim: 2 } => s2_basis(base),
        ManifoldSpec::Sphere { dim: 3 } => {
            let (w, x, y, z) = (base[0], base[1], base[2], base[3]);
            DMatrix::from_row_slice(4, 3, &[-x, -y, -z, w, z, -y, -z, w, x, y, -x, w])
        }
        ManifoldSpec::Sphere { dim } => householder_sphere_basis(*dim, base),
        ManifoldSpec::Spd { size } => {
            let n = *size;
            let mut b = DMatrix::zeros(n * n, n * (n + 1) / 2);
            for i in 0..n {
                b[(i * n + i, i)] = 1.0;
            }
            let mut k = n;
            for i in 0..n {
                for j in i + 1..n {
                    b[(i * n + j, k)] = 1.0 / SQRT_2;
                    b[(j * n + i, k)] = 1.0 / SQRT_2;
                    k += 1;
                }
            }
            b
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

/// QR of `[[-z, 0], [0, -z], [x, y]]`; near `z = 0` the largest coordinate is
/// swapped into the third slot first so the factorization stays full rank.
/// With `+z` in the middle entry the second column would not be tangent.
fn s2_basis(p: &[f64]) -> DMatrix<f64> {
    let mut perm = [0usize, 1, 2];
    if p[2].abs() < S2_DEGENERATE_Z {
        let big = if p[0].abs() >= p[1].abs() { 0 } else { 1 };
        perm.swap(big, 2);
    }
    let (x, y, z) = (p[perm[0]], p[perm[1]], p[perm[2]]);
    let a = DMatrix::from_row_slice(3, 2, &[-z, 0.0, 0.0, -z, x, y]);
    let q = a.qr().q();
    let mut b = DMatrix::zeros(3, 2);
    for (slot, &orig) in perm.iter().enumerate() {
        b.set_row(orig, &q.row(slot));
    }
    b
}

/// Columns 2..M+1 of the Householder reflection mapping `e_1` to `p`.
fn householder_sphere_basis(dim: usize, p: &[f64]) -> DMatrix<f64> {
    let n = dim + 1;
    let mut u = DVector::from_column_slice(p);
    u[0] -= 1.0;
    let uu = u.norm_squared();
    let h =
        if uu < 1e-24 { DMatrix::identity(n, n) } else { DMatrix::identity(n, n) - (&u * u.transpose()) * (2.0 / uu) };
    h.columns(1, dim).into_owned()
}

fn factor_exp(spec: &ManifoldSpec, base: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    match spec {
        ManifoldSpec::Euclidean { .. } => Ok(base.iter().zip(c).map(|(b, v)| b + v).collect()),
        ManifoldSpec::Sphere { .. } => {
            let u = factor_basis(spec, base) * DVector::from_column_slice(c);
            let r = u.norm();
            let mut y: Vec<f64> = if r < 1e-12 {
                base.iter().zip(u.iter()).map(|(p, v)| p + v).collect()
            } else {
                let (s, co) = r.sin_cos();
                base.iter().zip(u.iter()).map(|(p, v)| p * co + v * s / r).collect()
            };
            let n = norm(&y);
            y.iter_mut().for_each(|v| *v /= n);
            Ok(y)
        }
        ManifoldSpec::Spd { size } => {
            let p = DMatrix::from_row_slice(*size, *size, base);
            let (sqrt_p, inv_sqrt_p) = spd_sqrt_pair(&p);
            let w = &inv_sqrt_p * unvec_sym(*size, c) * &inv_sqrt_p;
            let y = symmetrize(&(&sqrt_p * sym_apply(&w, f64::exp) * &sqrt_p));
            let lo = sym_eig(&y).0[0];
            if !(lo > 0.0) {
                return Err(Error::Internal(format!(
                    "SPD exponential lost positive-definiteness (min eigenvalue {lo:e})"
                )));
            }
            Ok(to_row_major(&y))
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

fn factor_log(spec: &ManifoldSpec, base: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    match spec {
        ManifoldSpec::Euclidean { .. } => Ok(q.iter().zip(base).map(|(a, b)| a - b).collect()),
        ManifoldSpec::Sphere { .. } => {
            let antipodal: f64 = base.iter().zip(q).map(|(p, y)| (p + y) * (p + y)).sum::<f64>().sqrt();
            if antipodal < 1e-9 {
                return Err(Error::Domain("logarithmic map of an antipodal point is undefined".into()));
            }
            let c = dot(base, q);
            let w: Vec<f64> = q.iter().zip(base).map(|(y, p)| y - c * p).collect();
            let s = norm(&w);
            let dim = base.len() - 1;
            if s < 1e-300 {
                return Ok(vec![0.0; dim]);
            }
            let theta = s.atan2(c);
            let u = DVector::from_iterator(w.len(), w.iter().map(|v| theta * v / s));
            Ok((factor_basis(spec, base).transpose() * u).as_slice().to_vec())
        }
        ManifoldSpec::Spd { size } => {
            let p = DMatrix::from_row_slice(*size, *size, base);
            let y = DMatrix::from_row_slice(*size, *size, q);
            let (sqrt_p, inv_sqrt_p) = spd_sqrt_pair(&p);
            let w = symmetrize(&(&inv_sqrt_p * y * &inv_sqrt_p));
            let (vals, _) = sym_eig(&w);
            if !(vals[0] > 0.0) {
                return Err(Error::Validation(format!("SPD logarithm of a non-SPD matrix (eigenvalue {:e})", vals[0])));
            }
            let v = &sqrt_p * sym_apply(&w, f64::ln) * &sqrt_p;
            Ok(vec_sym(&v))
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

fn factor_distance(spec: &ManifoldSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    match spec {
        ManifoldSpec::Euclidean { .. } => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        ManifoldSpec::Sphere { .. } => {
            // atan2 form is accurate for both nearby and nearly antipodal points.
            let c = dot(a, b);
            let s = norm(&b.iter().zip(a).map(|(y, x)| y - c * x).collect::<Vec<_>>());
            Ok(s.atan2(c))
        }
        ManifoldSpec::Spd { size } => {
            let p = DMatrix::from_row_slice(*size, *size, a);
            let q = DMatrix::from_row_slice(*size, *size, b);
            let (_, inv_sqrt_p) = spd_sqrt_pair(&p);
            let (vals, _) = sym_eig(&(&inv_sqrt_p * q * &inv_sqrt_p));
            if !(vals[0] > 0.0) {
                return Err(Error::Validation("SPD distance to a non-SPD matrix".into()));
            }
            Ok(vals.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt())
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

fn factor_cov_log_det(spec: &ManifoldSpec, base: &[f64], c: &[f64]) -> Result<f64> {
    match spec {
        ManifoldSpec::Euclidean { .. } => Ok(0.0),
        ManifoldSpec::Sphere { dim } => {
            let r = norm(c);
            if r >= PI {
                log::warn!("change-of-volume term undefined for tangent norm {r} >= pi");
                return Ok(f64::NEG_INFINITY);
            }
            let sinc = if r < 1e-6 { 1.0 - r * r / 6.0 } else { r.sin() / r };
            Ok((*dim as f64 - 1.0) * sinc.ln())
        }
        ManifoldSpec::Spd { size } => {
            let p = DMatrix::from_row_slice(*size, *size, base);
            let (_, inv_sqrt_p) = spd_sqrt_pair(&p);
            let (mu, _) = sym_eig(&(&inv_sqrt_p * unvec_sym(*size, c) * &inv_sqrt_p));
            let mut total = 0.0;
            for i in 0..*size {
                for j in i..*size {
                    total += ln_exp_divided_difference(mu[i], mu[j]);
                }
            }
            Ok(total)
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

fn factor_exp_differential(spec: &ManifoldSpec, base: &[f64], c: &[f64]) -> DMatrix<f64> {
    match spec {
        ManifoldSpec::Euclidean { dim } => DMatrix::identity(*dim, *dim),
        ManifoldSpec::Sphere { .. } => {
            let b = factor_basis(spec, base);
            let cv = DVector::from_column_slice(c);
            let u = &b * &cv;
            let r = u.norm();
            let p = DVector::from_column_slice(base);
            // d/dc [p cos r + u sin(r)/r] with u = B c and dr/dc = uᵀB / r.
            let (sinc, dsinc_over_r) = if r < 1e-4 {
                (1.0 - r * r / 6.0, -1.0 / 3.0 + r * r / 30.0)
            } else {
                (r.sin() / r, (r * r.cos() - r.sin()) / (r * r * r))
            };
            let ut_b = u.transpose() * &b;
            &b * sinc + &u * &ut_b * dsinc_over_r - &p * &ut_b * sinc
        }
        ManifoldSpec::Spd { size } => {
            let n = *size;
            let p = DMatrix::from_row_slice(n, n, base);
            let (sqrt_p, inv_sqrt_p) = spd_sqrt_pair(&p);
            let w = &inv_sqrt_p * unvec_sym(n, c) * &inv_sqrt_p;
            let (mu, u) = sym_eig(&w);
            let dim = n * (n + 1) / 2;
            let mut out = DMatrix::zeros(n * n, dim);
            let mut e = vec![0.0; dim];
            for a in 0..dim {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[a] = 1.0;
                let h = u.transpose() * &inv_sqrt_p * unvec_sym(n, &e) * &inv_sqrt_p * &u;
                let dh = DMatrix::from_fn(n, n, |i, j| exp_divided_difference(mu[i], mu[j]) * h[(i, j)]);
                let col = &sqrt_p * &u * dh * u.transpose() * &sqrt_p;
                out.set_column(a, &DVector::from_vec(to_row_major(&col)));
            }
            out
        }
        ManifoldSpec::Product { .. } => unreachable!("factors are never products"),
    }
}

/// `G_ab = tr(Y⁻¹ E_a Y⁻¹ E_b)` over the symmetric frame.
fn spd_metric_gram(n: usize, point: &[f64]) -> Result<DMatrix<f64>> {
    let y = DMatrix::from_row_slice(n, n, point);
    let inv = sym_apply(&y, |l| 1.0 / l);
    let dim = n * (n + 1) / 2;
    let frames: Vec<DMatrix<f64>> = (0..dim)
        .map(|a| {
            let mut e = vec![0.0; dim];
            e[a] = 1.0;
            &inv * unvec_sym(n, &e)
        })
        .collect();
    Ok(DMatrix::from_fn(dim, dim, |a, b| (&frames[a] * &frames[b]).trace()))
}

fn spd_sqrt_pair(p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (sym_apply(p, f64::sqrt), sym_apply(p, |l| 1.0 / l.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s2() -> ManifoldSpec {
        ManifoldSpec::Sphere { dim: 2 }
    }

    fn spd2() -> ManifoldSpec {
        ManifoldSpec::Spd { size: 2 }
    }

    #[test]
    fn dims() {
        assert_eq!(s2().ambient_dim(), 3);
        assert_eq!(s2().intrinsic_dim(), 2);
        let spd3 = ManifoldSpec::Spd { size: 3 };
        assert_eq!(spd3.ambient_dim(), 9);
        assert_eq!(spd3.intrinsic_dim(), 6);
        let prod = ManifoldSpec::Product { components: vec![ManifoldSpec::Euclidean { dim: 2 }, s2()] };
        assert_eq!(prod.ambient_dim(), 5);
        assert_eq!(prod.intrinsic_dim(), 4);
    }

    #[test]
    fn zero_tangent_exp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [s2(), spd2(), ManifoldSpec::Euclidean { dim: 3 }] {
            let p = spec.random_point(&mut rng, 0.5);
            let y = spec.exp(&p, &vec![0.0; spec.intrinsic_dim()]).unwrap();
            for (a, b) in y.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_quarter_turn() {
        let base = ManifoldPoint::new(s2(), vec![1.0, 0.0, 0.0]).unwrap();
        let v = TangentCoords::from_ambient(base.clone(), &[0.0, PI / 2.0, 0.0]).unwrap();
        let y = exp_map(&base, &v).unwrap();
        for (a, b) in y.coords.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = ManifoldPoint::new(s2(), vec![0.0, 1.0, 0.0]).unwrap();
        let back = log_map(&base, &q).unwrap().to_ambient().unwrap();
        for (a, b) in back.iter().zip([0.0, PI / 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((distance(&base, &q).unwrap() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn spd_exp_log_at_identity() {
        let base = ManifoldPoint::basepoint(&spd2());
        let v = TangentCoords::new(base.clone(), vec![2f64.ln(), 3f64.ln(), 0.0]).unwrap();
        let y = exp_map(&base, &v).unwrap();
        for (a, b) in y.coords.iter().zip([2.0, 0.0, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = ManifoldPoint::new(spd2(), vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let l = log_map(&base, &q).unwrap();
        for (a, b) in l.coeffs.iter().zip([4f64.ln(), 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let e2 = 2f64.exp();
        let far = ManifoldPoint::new(spd2(), vec![e2, 0.0, 0.0, e2]).unwrap();
        assert!((distance(&base, &far).unwrap() - 2.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn antipodal_log_is_rejected() {
        let p = ManifoldPoint::new(s2(), vec![0.0, 0.0, 1.0]).unwrap();
        let q = ManifoldPoint::new(s2(), vec![0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(log_map(&p, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn coincident_log_is_zero() {
        let p = ManifoldPoint::new(s2(), vec![0.6, 0.0, 0.8]).unwrap();
        assert!(log_map(&p, &p).unwrap().coeffs.iter().all(|c| *c == 0.0));
        assert_eq!(distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn s3_basis_matches_explicit_frame() {
        let base = ManifoldPoint::new(ManifoldSpec::Sphere { dim: 3 }, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = tangent_basis(&base).unwrap().columns;
        let expected = DMatrix::from_row_slice(4, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((b - expected).norm() < 1e-15);
    }

    #[test]
    fn s2_basis_at_pole_and_equator() {
        for p in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0]] {
            let b = s2_basis(&p);
            assert!((b.transpose() * &b - DMatrix::identity(2, 2)).norm() < 1e-12);
            let pv = DVector::from_column_slice(&p);
            assert!((b.transpose() * pv).norm() < 1e-12);
        }
    }

    #[test]
    fn spd_basis_at_identity() {
        let b = tangent_basis(&ManifoldPoint::basepoint(&spd2())).unwrap().columns;
        let h = 1.0 / SQRT_2;
        let expected = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, h, 0.0, 0.0, h, 0.0, 1.0, 0.0]);
        assert!((b - expected).norm() < 1e-15);
    }

    #[test]
    fn cov_log_det_values() {
        let base = ManifoldPoint::basepoint(&s2());
        assert_eq!(cov_log_det(&base, &TangentCoords::zero(base.clone())).unwrap(), 0.0);
        let v = TangentCoords::new(base.clone(), vec![PI / 2.0, 0.0]).unwrap();
        // (M - 1) ln(sin r / r) with M = 2, r = π/2
        assert!((cov_log_det(&base, &v).unwrap() - (2.0 / PI).ln()).abs() < 1e-12);
        let at_pi = TangentCoords::new(base.clone(), vec![0.0, PI]).unwrap();
        assert_eq!(cov_log_det(&base, &at_pi).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn project_check_examples() {
        let s1 = ManifoldSpec::Sphere { dim: 1 };
        assert!(project_check(&[0.6, 0.8], &s1, 1e-6));
        assert!(!project_check(&[0.6, 0.9], &s1, 1e-6));
        assert!(!project_check(&[1.0, 0.0, 0.0, -0.1], &spd2(), 1e-6));
        assert!(project_check(&[2.0, 0.1, 0.1, 1.0], &spd2(), 1e-6));
    }

    #[test]
    fn dimension_mismatch_is_structured() {
        assert!(matches!(s2().exp(&[1.0, 0.0, 0.0], &[0.1]), Err(Error::Dimension(_))));
        let a = ManifoldPoint::basepoint(&s2());
        let b = ManifoldPoint::basepoint(&spd2());
        assert!(matches!(distance(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_spd_log_rejected() {
        assert!(matches!(spd2().log(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, -1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn spec_json_shape() {
        let p = ManifoldPoint::basepoint(&ManifoldSpec::Product {
            components: vec![ManifoldSpec::Euclidean { dim: 2 }, s2()],
        });
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"spec":{"kind":"product","components":[{"kind":"euclidean","dim":2},{"kind":"sphere","dim":2}]},"coords":[0.0,0.0,1.0,0.0,0.0]}"#
        );
        let back: ManifoldPoint = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
