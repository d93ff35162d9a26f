//! Synthetic demonstration sets: a J in R² paired with a C on S², and a C in
//! R² paired with rotating SPD ellipsoids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lvm::Dataset;
use crate::manifolds::ManifoldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// J in R² with a C on S².
    JC,
    /// C in R² with 2×2 SPD profiles.
    CSpd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n_traj: usize,
    pub n_points: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn default_for(kind: SyntheticKind) -> Self {
        let n_points = match kind {
            SyntheticKind::JC => 200,
            SyntheticKind::CSpd => 100,
        };
        Self { kind, n_traj: 6, n_points, noise: 0.01, seed: 0 }
    }
}

const J_POLYLINE: [[f64; 2]; 8] =
    [[0.5, 1.0], [0.5, 0.0], [0.45, -0.35], [0.3, -0.55], [0.0, -0.65], [-0.3, -0.55], [-0.45, -0.35], [-0.5, -0.15]];

/// Geodesic radius of the C on the sphere.
const C_RADIUS: f64 = 0.75;

/// Principal axes of the SPD ellipsoids.
const SPD_AXES: (f64, f64) = (2.0, 0.5);

fn c_polyline() -> Vec<[f64; 2]> {
    (0..9)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_4 + i as f64 * 1.5 * std::f64::consts::PI / 8.0;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Chaikin corner cutting with fixed endpoints.
fn chaikin(points: &[[f64; 2]], rounds: usize) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    for _ in 0..rounds {
        let mut next = vec![pts[0]];
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            next.push([0.75 * a[0] + 0.25 * b[0], 0.75 * a[1] + 0.25 * b[1]]);
            next.push([0.25 * a[0] + 0.75 * b[0], 0.25 * a[1] + 0.75 * b[1]]);
        }
        next.push(*pts.last().unwrap());
        pts = next;
    }
    pts
}

fn resample(points: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    crate::geodesics::resample_uniform(&rows, n).into_iter().map(|p| [p[0], p[1]]).collect()
}

fn smooth_curve(polyline: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    resample(&chaikin(polyline, 4), n)
}

/// Unit tangent angle along a sampled planar curve.
fn tangent_angles(curve: &[[f64; 2]]) -> Vec<f64> {
    let n = curve.len();
    (0..n)
        .map(|i| {
            let (a, b) = (curve[i.saturating_sub(1)], curve[(i + 1).min(n - 1)]);
            (b[1] - a[1]).atan2(b[0] - a[0])
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    if config.n_points < 10 {
        return Err(Error::Validation(format!("need at least 10 points per trajectory, got {}", config.n_points)));
    }
    if config.n_traj == 0 {
        return Err(Error::Validation("need at least one trajectory".into()));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::Validation("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = smooth_curve(&c_polyline(), config.n_points);
    let (spec, clean): (ManifoldSpec, Vec<Vec<f64>>) = match config.kind {
        SyntheticKind::JC => {
            let spec = ManifoldSpec::Product {
                components: vec![ManifoldSpec::Euclidean { dim: 2 }, ManifoldSpec::Sphere { dim: 2 }],
            };
            let j = smooth_curve(&J_POLYLINE, config.n_points);
            let sphere = ManifoldSpec::Sphere { dim: 2 };
            let north = [0.0, 0.0, 1.0];
            let clean = j
                .iter()
                .zip(&c)
                .map(|(pj, pc)| {
                    let s = sphere.exp(&north, &[C_RADIUS * pc[0], C_RADIUS * pc[1]])?;
                    Ok(vec![pj[0], pj[1], s[0], s[1], s[2]])
                })
                .collect::<Result<Vec<_>>>()?;
            (spec, clean)
        }
        SyntheticKind::CSpd => {
            let spec = ManifoldSpec::Product {
                components: vec![ManifoldSpec::Euclidean { dim: 2 }, ManifoldSpec::Spd { size: 2 }],
            };
            let phi = tangent_angles(&c);
            let clean = c
                .iter()
                .zip(&phi)
                .map(|(p, &f)| {
                    let (cf, sf) = (f.cos(), f.sin());
                    let (a, b) = SPD_AXES;
                    let m11 = a * cf * cf + b * sf * sf;
                    let m12 = (a - b) * cf * sf;
                    let m22 = a * sf * sf + b * cf * cf;
                    vec![p[0], p[1], m11, m12, m12, m22]
                })
                .collect();
            (spec, clean)
        }
    };
    let d = spec.intrinsic_dim();
    let mut points = Vec::with_capacity(config.n_traj * config.n_points);
    let mut ids = Vec::with_capacity(points.capacity());
    let mut times = Vec::with_capacity(points.capacity());
    for traj in 0..config.n_traj {
        for (i, p) in clean.iter().enumerate() {
            let eps = gaussian(&mut rng, d, config.noise);
            points.push(spec.exp(p, &eps)?);
            ids.push(traj);
            times.push(i as f64 / (config.n_points - 1) as f64);
        }
    }
    let mut dataset = Dataset::new(spec, points, ids)?;
    dataset.timestamps = Some(times);
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jc_default_shape_and_sphere_norm() {
        let ds = generate_synthetic(&SyntheticConfig::default_for(SyntheticKind::JC)).unwrap();
        assert_eq!(ds.len(), 1200);
        assert_eq!(ds.trajectories().len(), 6);
        for p in &ds.points {
            let n = (p[2] * p[2] + p[3] * p[3] + p[4] * p[4]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_profiles_are_spd() {
        let ds = generate_synthetic(&SyntheticConfig::default_for(SyntheticKind::CSpd)).unwrap();
        assert_eq!(ds.len(), 600);
        for p in &ds.points {
            assert!(p[2] > 0.0 && p[2] * p[5] - p[3] * p[4] > 0.0);
            assert_eq!(p[3], p[4]);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = SyntheticConfig { seed: 7, ..SyntheticConfig::default_for(SyntheticKind::JC) };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 8, ..cfg };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn too_few_points_rejected() {
        let cfg = SyntheticConfig { n_points: 5, ..SyntheticConfig::default_for(SyntheticKind::JC) };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
