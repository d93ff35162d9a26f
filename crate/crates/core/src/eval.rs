//! Trajectory discrepancy, on-manifold checks and the model comparison benchmark.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geodesics::{graph_geodesic, resample_uniform, straight_line, GeodesicCurve};
use crate::lvm::{train_map, Dataset, LatentModel, TrainConfig};
use crate::manifolds::{project_check, ManifoldSpec};
use crate::pullback::{Bounds, EuclideanMetric, KdeMetric, MetricField, PullbackMetric};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    AmbientEuclidean,
    ManifoldGeodesic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub candidate: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub distance_mode: DistanceMode,
    /// Needed for [`DistanceMode::ManifoldGeodesic`].
    pub spec: Option<ManifoldSpec>,
}

impl TrajectoryPair {
    pub fn euclidean(candidate: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> Self {
        Self { candidate, reference, distance_mode: DistanceMode::AmbientEuclidean, spec: None }
    }

    pub fn manifold(candidate: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, spec: ManifoldSpec) -> Self {
        Self { candidate, reference, distance_mode: DistanceMode::ManifoldGeodesic, spec: Some(spec) }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Σ_j min_i d(a_i, b_j) + Σ_i min_j d(a_i, b_j)`.
pub fn dtwd(pair: &TrajectoryPair) -> Result<f64> {
    let (a, b) = (&pair.candidate, &pair.reference);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("DTWD needs two non-empty trajectories".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return Err(Error::Dimension("DTWD trajectories have inconsistent point dimensions".into()));
    }
    let d: Vec<Vec<f64>> = match pair.distance_mode {
        DistanceMode::AmbientEuclidean => a.iter().map(|p| b.iter().map(|q| euclid(p, q)).collect()).collect(),
        DistanceMode::ManifoldGeodesic => {
            let spec =
                pair.spec.as_ref().ok_or_else(|| Error::Validation("manifold DTWD needs a manifold spec".into()))?;
            if spec.ambient_dim() != dim {
                return Err(Error::Dimension(format!(
                    "points have {dim} coordinates but the spec expects {}",
                    spec.ambient_dim()
                )));
            }
            a.iter()
                .map(|p| b.iter().map(|q| spec.distance(p, q)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?
        }
    };
    let col_mins: f64 = (0..b.len()).map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min)).sum();
    let row_mins: f64 = d.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).sum();
    Ok(col_mins + row_mins)
}

/// Fraction of `decoded` passing [`project_check`]. Empty input gives 0.
pub fn on_manifold_fraction(decoded: &[Vec<f64>], spec: &ManifoldSpec, tol: f64) -> f64 {
    if decoded.is_empty() {
        return 0.0;
    }
    decoded.iter().filter(|p| project_check(p, spec, tol)).count() as f64 / decoded.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// Euclidean model, straight latent line.
    EuclideanGplvm,
    /// Euclidean model, pullback geodesic.
    PullbackGplvm,
    /// Wrapped model, straight latent line.
    Wgplvm,
    /// Wrapped model, pullback geodesic.
    Riemann2,
    /// Wrapped model, geodesic under a latent-density metric.
    Kde { sigma: f64 },
}

impl Variant {
    pub fn standard() -> Vec<Variant> {
        vec![Variant::EuclideanGplvm, Variant::PullbackGplvm, Variant::Wgplvm, Variant::Riemann2]
    }

    pub fn name(&self) -> String {
        match self {
            Variant::EuclideanGplvm => "GPLVM".into(),
            Variant::PullbackGplvm => "pGPLVM".into(),
            Variant::Wgplvm => "WGPLVM".into(),
            Variant::Riemann2 => "Riemann2".into(),
            Variant::Kde { sigma } => format!("KDE(sigma={sigma})"),
        }
    }

    pub fn wrapped(&self) -> bool {
        !matches!(self, Variant::EuclideanGplvm | Variant::PullbackGplvm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicConfig {
    /// Grid nodes per axis.
    pub resolution: usize,
    /// Padding of the latent bounding box, relative to its extent.
    pub pad: f64,
    /// Points per decoded curve.
    pub samples: usize,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self { resolution: 50, pad: 0.1, samples: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train: TrainConfig,
    pub geodesic: GeodesicConfig,
    /// Training points drawn per seed across all trajectories.
    pub subsample: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub on_manifold_tol: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            geodesic: GeodesicConfig::default(),
            subsample: 200,
            seeds: vec![0, 1, 2],
            variants: Variant::standard(),
            on_manifold_tol: 1e-6,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Validation("benchmark needs at least one seed and one variant".into()));
        }
        if self.geodesic.resolution < 2 || self.geodesic.samples < 2 || !(self.geodesic.pad >= 0.0) {
            return Err(Error::Validation("invalid geodesic settings".into()));
        }
        if !(self.on_manifold_tol > 0.0) {
            return Err(Error::Validation("on-manifold tolerance must be positive".into()));
        }
        if self.train.latent_dim != 2 {
            return Err(Error::Unsupported("the benchmark uses grid geodesics and needs latent_dim = 2".into()));
        }
        for v in &self.variants {
            if let Variant::Kde { sigma } = v {
                if !(*sigma > 0.0) {
                    return Err(Error::Validation(format!("KDE bandwidth must be positive, got {sigma}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub model: String,
    pub variant: Variant,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub on_manifold_fraction: f64,
    pub dtwd_mean: f64,
    pub dtwd_std: f64,
    /// Mean DTWD over demonstrations for each seed.
    pub dtwd_per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub results: Vec<VariantResult>,
}

impl BenchmarkReport {
    pub fn result(&self, variant: &Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| &r.variant == variant)
    }

    /// Rows are metrics, columns are models.
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.results.iter().map(|r| r.model.as_str()).collect();
        let _ = writeln!(s, "| Metric | {} |", names.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(names.len()));
        let cell = |r: &VariantResult, f: &dyn Fn(&VariantResult) -> String| {
            if r.status == "ok" {
                f(r)
            } else {
                "failed".to_string()
            }
        };
        let fracs: Vec<String> =
            self.results.iter().map(|r| cell(r, &|r| format!("{:.2}", 100.0 * r.on_manifold_fraction))).collect();
        let _ = writeln!(s, "| On manifold (%) | {} |", fracs.join(" | "));
        let dtwds: Vec<String> =
            self.results.iter().map(|r| cell(r, &|r| format!("{:.2} ± {:.2}", r.dtwd_mean, r.dtwd_std))).collect();
        let _ = writeln!(s, "| DTWD | {} |", dtwds.join(" | "));
        s
    }
}

/// Endpoints, decoded curve and scores of one variant on one demonstration.
#[derive(Clone, Debug)]
pub struct DemoEvaluation {
    pub curve: GeodesicCurve,
    pub decoded: Vec<Vec<f64>>,
    pub dtwd: f64,
}

/// A trained model together with its training subset.
pub struct TrainedModel<'a> {
    pub model: LatentModel,
    pub training: &'a Dataset,
}

impl TrainedModel<'_> {
    /// Latent point of the training sample nearest to `y` in ambient coordinates.
    pub fn nearest_latent(&self, y: &[f64]) -> Vec<f64> {
        let best = self
            .training
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (euclid(p, y), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
            .unwrap_or(0);
        self.model.latent().row(best).iter().copied().collect()
    }
}

fn variant_metric<'m>(variant: &Variant, model: &'m LatentModel) -> Result<Box<dyn MetricField + 'm>> {
    Ok(match variant {
        Variant::EuclideanGplvm | Variant::Wgplvm => Box::new(EuclideanMetric(model.latent_dim())),
        Variant::PullbackGplvm | Variant::Riemann2 => Box::new(PullbackMetric { model }),
        Variant::Kde { sigma } => Box::new(KdeMetric::new(model.latent().clone(), *sigma)?),
    })
}

/// Computes the variant's latent curve between the demonstration endpoints,
/// decodes it and scores it against the full demonstration.
pub fn evaluate_demo(
    variant: &Variant,
    trained: &TrainedModel<'_>,
    demo: &[Vec<f64>],
    config: &GeodesicConfig,
) -> Result<DemoEvaluation> {
    let model = &trained.model;
    let start = trained.nearest_latent(&demo[0]);
    let end = trained.nearest_latent(&demo[demo.len() - 1]);
    let metric = variant_metric(variant, model)?;
    let curve = match variant {
        Variant::EuclideanGplvm | Variant::Wgplvm => straight_line(metric.as_ref(), &start, &end, config.samples)?,
        _ => {
            let bounds = Bounds::around(model.latent(), config.pad)?;
            graph_geodesic(metric.as_ref(), &start, &end, bounds, config.resolution)?
        }
    };
    let latent = resample_uniform(&curve.samples, config.samples);
    let decoded = latent.iter().map(|x| model.decode_coords(x)).collect::<Result<Vec<_>>>()?;
    let pair = if variant.wrapped() {
        TrajectoryPair::manifold(decoded.clone(), demo.to_vec(), model.spec().clone())
    } else {
        TrajectoryPair::euclidean(decoded.clone(), demo.to_vec())
    };
    let score = dtwd(&pair)?;
    Ok(DemoEvaluation { curve, decoded, dtwd: score })
}

/// Seeded subset of `total` points spread evenly over trajectories, sorted
/// within each trajectory.
pub fn subsample_indices(dataset: &Dataset, total: usize, seed: u64) -> Vec<usize> {
    let trajs = dataset.trajectories();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    let base = total / trajs.len();
    let extra = total % trajs.len();
    for (k, r) in trajs.iter().enumerate() {
        let want = (base + usize::from(k < extra)).min(r.len());
        let mut picked = sample(&mut rng, r.len(), want).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| r.start + i));
    }
    out
}

struct SeedOutcome {
    /// Per variant: mean DTWD over demonstrations, decoded points.
    per_variant: Vec<Result<(f64, Vec<Vec<f64>>)>>,
}

fn run_seed(dataset: &Dataset, config: &BenchmarkConfig, seed: u64) -> Result<SeedOutcome> {
    let wrapped_data = dataset.subset(&subsample_indices(dataset, config.subsample, seed))?;
    let euclid_data = wrapped_data.as_euclidean();
    let need_euclid = config.variants.iter().any(|v| !v.wrapped());
    let need_wrapped = config.variants.iter().any(|v| v.wrapped());
    let (euclid_model, wrapped_model) = rayon::join(
        || need_euclid.then(|| train_map(&euclid_data, &config.train)),
        || need_wrapped.then(|| train_map(&wrapped_data, &config.train)),
    );
    let euclid = euclid_model.map(|m| m.map(|model| TrainedModel { model, training: &euclid_data }));
    let wrapped = wrapped_model.map(|m| m.map(|model| TrainedModel { model, training: &wrapped_data }));
    let demos: Vec<Vec<Vec<f64>>> = dataset.trajectories().into_iter().map(|r| dataset.points[r].to_vec()).collect();
    let per_variant = config
        .variants
        .par_iter()
        .map(|variant| {
            let trained = match (variant.wrapped(), &euclid, &wrapped) {
                (false, Some(Ok(t)), _) | (true, _, Some(Ok(t))) => t,
                (false, Some(Err(e)), _) | (true, _, Some(Err(e))) => {
                    return Err(Error::Numerical(format!("training failed: {e}")))
                }
                _ => return Err(Error::Internal("variant model was not trained".into())),
            };
            let mut total = 0.0;
            let mut decoded = Vec::new();
            for demo in &demos {
                let ev = evaluate_demo(variant, trained, demo, &config.geodesic)?;
                total += ev.dtwd;
                decoded.extend(ev.decoded);
            }
            Ok((total / demos.len() as f64, decoded))
        })
        .collect();
    Ok(SeedOutcome { per_variant })
}

/// Trains a Euclidean and a wrapped model on a seeded subsample per seed and
/// scores every configured variant against all demonstrations of `dataset`.
pub fn benchmark(dataset: &Dataset, config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    dataset.validate()?;
    let ambient_spec = dataset.spec.clone();
    let outcomes: Vec<SeedOutcome> =
        config.seeds.iter().map(|&s| run_seed(dataset, config, s)).collect::<Result<_>>()?;
    let results = config
        .variants
        .iter()
        .enumerate()
        .map(|(k, variant)| {
            let mut per_seed = Vec::new();
            let mut on = 0usize;
            let mut count = 0usize;
            for o in &outcomes {
                match &o.per_variant[k] {
                    Ok((mean, decoded)) => {
                        per_seed.push(*mean);
                        count += decoded.len();
                        on +=
                            decoded.iter().filter(|p| project_check(p, &ambient_spec, config.on_manifold_tol)).count();
                    }
                    Err(e) => {
                        log::warn!("variant {} failed: {e}", variant.name());
                        return VariantResult {
                            model: variant.name(),
                            variant: *variant,
                            status: "failed".into(),
                            error: Some(e.to_string()),
                            on_manifold_fraction: 0.0,
                            dtwd_mean: 0.0,
                            dtwd_std: 0.0,
                            dtwd_per_seed: vec![],
                        };
                    }
                }
            }
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let std = (per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            VariantResult {
                model: variant.name(),
                variant: *variant,
                status: "ok".into(),
                error: None,
                on_manifold_fraction: if count == 0 { 0.0 } else { on as f64 / count as f64 },
                dtwd_mean: mean,
                dtwd_std: std,
                dtwd_per_seed: per_seed,
            }
        })
        .collect();
    Ok(BenchmarkReport { seeds: config.seeds.clone(), config_digest: config.digest()?, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_dtwd() {
        let pair =
            TrajectoryPair::euclidean(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(dtwd(&pair).unwrap(), 2.0);
        let single = TrajectoryPair::euclidean(vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]]);
        assert_eq!(dtwd(&single).unwrap(), 10.0);
    }

    #[test]
    fn manifold_mode_needs_matching_spec() {
        let s2 = ManifoldSpec::Sphere { dim: 2 };
        let pair = TrajectoryPair::manifold(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], s2.clone());
        assert!(dtwd(&pair).is_err());
        let pair = TrajectoryPair::manifold(vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]], s2);
        assert!((dtwd(&pair).unwrap() - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn fractions() {
        let s2 = ManifoldSpec::Sphere { dim: 2 };
        assert_eq!(on_manifold_fraction(&[vec![1.1, 0.0, 0.0]], &s2, 1e-6), 0.0);
        assert_eq!(on_manifold_fraction(&[vec![1.1, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &s2, 1e-6), 0.5);
    }

    #[test]
    fn subsample_is_seeded_and_sorted() {
        let ds = Dataset::new(
            ManifoldSpec::Euclidean { dim: 1 },
            (0..30).map(|i| vec![i as f64]).collect(),
            (0..30).map(|i| i / 10).collect(),
        )
        .unwrap();
        let a = subsample_indices(&ds, 12, 3);
        assert_eq!(a, subsample_indices(&ds, 12, 3));
        assert_eq!(a.len(), 12);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.iter().filter(|&&i| i < 10).count(), 4);
    }
}
