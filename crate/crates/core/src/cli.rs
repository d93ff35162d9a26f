//! Command-line front end: argument parsing, config merging and artifact output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{benchmark, BenchmarkConfig, Variant};
use crate::geodesics::{graph_geodesic, spline_geodesic, straight_line, GeodesicCurve, SplineConfig};
use crate::io::{csv_string, load_spd_csv, read_json, to_json, write_atomic};
use crate::kernels::BCComponent;
use crate::lvm::{train_map, BackConstraintConfig, Dataset, LatentModel, TrainConfig};
use crate::pullback::{metric_grid, Bounds, EuclideanMetric, KdeMetric, MetricField, MetricGrid, PullbackMetric};
use crate::synthetic::{generate_synthetic, SyntheticConfig, SyntheticKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wlvm", version, about = "Wrapped GP latent variable models with pullback geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic demonstration dataset.
    GenerateData(GenerateArgs),
    /// Fit a model by MAP estimation.
    Train(TrainArgs),
    /// Evaluate a latent metric on a regular grid.
    MetricGrid(MetricGridArgs),
    /// Compute and decode a latent curve between two points.
    Geodesic(GeodesicArgs),
    /// Decode latent points from a CSV file.
    Decode(DecodeArgs),
    /// Train all model variants and compare their geodesics with the demonstrations.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "jc")]
    pub kind: SyntheticKind,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub gpdm: bool,
    pub gamma_lengthscale: bool,
}

impl Default for Priors {
    fn default() -> Self {
        Self { gpdm: true, gamma_lengthscale: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackConstraintSettings {
    pub enabled: bool,
    /// Shared by every manifold factor.
    pub lengthscale: f64,
    pub variance: f64,
    pub n_max: usize,
}

impl Default for BackConstraintSettings {
    fn default() -> Self {
        Self { enabled: false, lengthscale: 0.2, variance: 1.0, n_max: 10 }
    }
}

/// Training settings as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub latent_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub priors: Priors,
    pub back_constraints: BackConstraintSettings,
    pub seed: u64,
    pub task_rank: Option<usize>,
    pub per_task_noise: bool,
    pub dynamics_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            latent_dim: t.latent_dim,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            priors: Priors::default(),
            back_constraints: BackConstraintSettings::default(),
            seed: 0,
            task_rank: t.task_rank,
            per_task_noise: t.per_task_noise,
            dynamics_noise: t.dynamics_noise,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self, dataset: &Dataset) -> Result<TrainConfig> {
        let bc = &self.back_constraints;
        if bc.enabled && !(bc.lengthscale > 0.0 && bc.variance > 0.0) {
            return Err(Error::Validation("back-constraint kernel parameters must be positive".into()));
        }
        let config = TrainConfig {
            latent_dim: self.latent_dim,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            gpdm: self.priors.gpdm,
            gamma_lengthscale_prior: self.priors.gamma_lengthscale,
            back_constraints: bc.enabled.then(|| BackConstraintConfig {
                components: vec![
                    BCComponent { lengthscale: bc.lengthscale, variance: bc.variance };
                    dataset.spec.factors().len()
                ],
                n_max: bc.n_max,
            }),
            task_rank: self.task_rank,
            per_task_noise: self.per_task_noise,
            dynamics_noise: self.dynamics_noise,
            ..TrainConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset JSON, or a CSV of flattened SPD matrices with `--spd-size`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub spd_size: Option<usize>,
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gpdm: Option<bool>,
    #[arg(long)]
    pub gamma_prior: Option<bool>,
    #[arg(long)]
    pub back_constraints: Option<bool>,
    #[arg(long)]
    pub bc_lengthscale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Pullback,
    Kde,
    Euclidean,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    #[arg(long, value_enum, default_value = "pullback")]
    pub metric: MetricKind,
    /// KDE bandwidth.
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct MetricGridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// `x1_min,x2_min,x1_max,x2_max`; the padded latent bounding box when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<f64>>,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Graph,
    Spline,
    Straight,
}

#[derive(Debug, Args)]
pub struct GeodesicArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub start: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub end: Vec<f64>,
    #[arg(long, value_enum, default_value = "graph")]
    pub solver: Solver,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// JSON spline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Samples of the straight-line solver.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with columns `x1..xQ`, optionally preceded by `t`.
    #[arg(long)]
    pub latent: PathBuf,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON benchmark config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Adds a density-metric variant per bandwidth.
    #[arg(long, value_delimiter = ',')]
    pub kde_sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    artifacts: Vec<Artifact>,
}

/// Collects artifacts written under one output directory.
struct Output {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Output {
    fn new(args: &OutputArgs) -> Result<Self> {
        std::fs::create_dir_all(&args.output_dir)?;
        Ok(Self { dir: args.output_dir.clone(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.artifacts.push(Artifact { path: name.to_string(), sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(())
    }

    fn finish<C: Serialize>(self, command: &str, config: &C) -> Result<()> {
        let config_digest = hex::encode(Sha256::digest(serde_json::to_vec(config)?));
        let manifest = Manifest { command, config_digest, artifacts: self.artifacts };
        write_atomic(&self.dir.join("manifest.json"), to_json(&manifest)?.as_bytes())
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

pub fn load_dataset(path: &Path, spd_size: Option<usize>) -> Result<Dataset> {
    let dataset: Dataset = match spd_size {
        Some(size) => load_spd_csv(path, size)?,
        None => read_json(path)?,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn point_rows(points: &[Vec<f64>]) -> (Vec<String>, Vec<Vec<f64>>) {
    let dim = points.first().map_or(0, |p| p.len());
    ((1..=dim).map(|i| format!("y{i}")).collect(), points.to_vec())
}

pub fn cmd_generate_data(args: &GenerateArgs) -> Result<()> {
    let defaults = SyntheticConfig::default_for(args.kind);
    let config = SyntheticConfig {
        kind: args.kind,
        n_traj: args.n_traj.unwrap_or(defaults.n_traj),
        n_points: args.n_points.unwrap_or(defaults.n_points),
        noise: args.noise.unwrap_or(defaults.noise),
        seed: args.seed,
    };
    let dataset = generate_synthetic(&config)?;
    let mut out = Output::new(&args.out)?;
    out.write("dataset.json", to_json(&dataset)?.as_bytes())?;
    out.finish("generate-data", &config)
}

pub fn cmd_train(args: &TrainArgs) -> Result<LatentModel> {
    let dataset = load_dataset(&args.dataset, args.spd_size)?;
    let mut run: RunConfig = read_config(args.config.as_deref())?;
    if let Some(v) = args.latent_dim {
        run.latent_dim = v;
    }
    if let Some(v) = args.iterations {
        run.iterations = v;
    }
    if let Some(v) = args.learning_rate {
        run.learning_rate = v;
    }
    if let Some(v) = args.gpdm {
        run.priors.gpdm = v;
    }
    if let Some(v) = args.gamma_prior {
        run.priors.gamma_lengthscale = v;
    }
    if let Some(v) = args.back_constraints {
        run.back_constraints.enabled = v;
    }
    if let Some(v) = args.bc_lengthscale {
        run.back_constraints.lengthscale = v;
    }
    if let Some(v) = args.seed {
        run.seed = v;
    }
    let config = run.train_config(&dataset)?;
    let model = train_map(&dataset, &config)?;
    let mut out = Output::new(&args.out)?;
    out.write("model.json", model.to_json()?.as_bytes())?;
    let trace: Vec<Vec<f64>> = model.objective_trace().iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
    out.write("trace.csv", csv_string(&["iteration".into(), "objective".into()], &trace)?.as_bytes())?;
    out.finish("train", &run)?;
    Ok(model)
}

fn build_metric<'m>(model: &'m LatentModel, args: &MetricArgs) -> Result<Box<dyn MetricField + 'm>> {
    Ok(match args.metric {
        MetricKind::Pullback => Box::new(PullbackMetric { model }),
        MetricKind::Kde => Box::new(KdeMetric::new(model.latent().clone(), args.sigma)?),
        MetricKind::Euclidean => Box::new(EuclideanMetric(model.latent_dim())),
    })
}

fn require_2d(model: &LatentModel, what: &str) -> Result<()> {
    if model.latent_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "{what} needs a 2-D latent space, the model has Q = {}",
            model.latent_dim()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct GridRun {
    model_sha256: String,
    bounds: Bounds,
    resolution: usize,
    metric: MetricKind,
    sigma: f64,
}

pub fn cmd_metric_grid(args: &MetricGridArgs) -> Result<MetricGrid> {
    let model = LatentModel::load(&args.model)?;
    require_2d(&model, "metric-grid")?;
    let bounds = match &args.bounds {
        Some(b) if b.len() == 4 => Bounds { min: [b[0], b[1]], max: [b[2], b[3]] },
        Some(b) => return Err(Error::Validation(format!("--bounds takes 4 values, got {}", b.len()))),
        None => Bounds::around(model.latent(), 0.1)?,
    };
    bounds.validate()?;
    let metric = build_metric(&model, &args.metric)?;
    let grid = metric_grid(metric.as_ref(), bounds, args.resolution)?;
    let mut out = Output::new(&args.out)?;
    out.write("metric_grid.csv", csv_string(&MetricGrid::header(), &grid.rows())?.as_bytes())?;
    let run = GridRun {
        model_sha256: file_digest(&args.model)?,
        bounds,
        resolution: args.resolution,
        metric: args.metric.metric,
        sigma: args.metric.sigma,
    };
    out.finish("metric-grid", &run)?;
    Ok(grid)
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct GeodesicRun {
    model_sha256: String,
    start: Vec<f64>,
    end: Vec<f64>,
    solver: Solver,
    metric: MetricKind,
    sigma: f64,
    resolution: usize,
    samples: usize,
    spline: SplineConfig,
}

#[derive(Serialize)]
struct CurveSidecar<'a> {
    total_length: f64,
    energy: f64,
    solver: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_norm: Option<f64>,
    config: &'a GeodesicRun,
}

pub fn cmd_geodesic(args: &GeodesicArgs) -> Result<GeodesicCurve> {
    let model = LatentModel::load(&args.model)?;
    let q = model.latent_dim();
    if args.start.len() != q || args.end.len() != q {
        return Err(Error::Dimension(format!("start and end need {q} coordinates")));
    }
    let spline: SplineConfig = read_config(args.config.as_deref())?;
    let metric = build_metric(&model, &args.metric)?;
    let curve = match args.solver {
        Solver::Straight => straight_line(metric.as_ref(), &args.start, &args.end, args.samples)?,
        Solver::Spline => spline_geodesic(metric.as_ref(), &args.start, &args.end, spline)?,
        Solver::Graph => {
            require_2d(&model, "the graph solver")?;
            let mut bounds = Bounds::around(model.latent(), 0.1)?;
            for k in 0..2 {
                bounds.min[k] = bounds.min[k].min(args.start[k]).min(args.end[k]);
                bounds.max[k] = bounds.max[k].max(args.start[k]).max(args.end[k]);
            }
            graph_geodesic(metric.as_ref(), &args.start, &args.end, bounds, args.resolution)?
        }
    };
    let run = GeodesicRun {
        model_sha256: file_digest(&args.model)?,
        start: args.start.clone(),
        end: args.end.clone(),
        solver: args.solver,
        metric: args.metric.metric,
        sigma: args.metric.sigma,
        resolution: args.resolution,
        samples: args.samples,
        spline,
    };
    let decoded = curve.samples.iter().map(|x| model.decode_coords(x)).collect::<Result<Vec<_>>>()?;
    let mut out = Output::new(&args.out)?;
    out.write("curve.csv", csv_string(&curve.csv_header(), &curve.csv_rows())?.as_bytes())?;
    let sidecar = CurveSidecar {
        total_length: curve.total_length,
        energy: curve.energy,
        solver: &curve.solver,
        grad_norm: curve.grad_norm,
        config: &run,
    };
    out.write("curve.json", to_json(&sidecar)?.as_bytes())?;
    let (header, rows) = point_rows(&decoded);
    out.write("decoded.csv", csv_string(&header, &rows)?.as_bytes())?;
    out.finish("geodesic", &run)?;
    Ok(curve)
}

/// Reads latent rows; a leading `t` column is dropped.
fn read_latent_csv(path: &Path, q: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let skip = usize::from(reader.headers()?.get(0) == Some("t"));
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .skip(skip)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation(format!("row {}: {e}", line + 2)))?;
        if values.len() != q {
            return Err(Error::Dimension(format!(
                "row {} has {} latent coordinates, expected {q}",
                line + 2,
                values.len()
            )));
        }
        rows.push(values);
    }
    Ok(rows)
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<Vec<Vec<f64>>> {
    let model = LatentModel::load(&args.model)?;
    let latent = read_latent_csv(&args.latent, model.latent_dim())?;
    let decoded = latent.iter().map(|x| model.decode_coords(x)).collect::<Result<Vec<_>>>()?;
    let mut out = Output::new(&args.out)?;
    let (header, rows) = point_rows(&decoded);
    out.write("decoded.csv", csv_string(&header, &rows)?.as_bytes())?;
    #[derive(Serialize)]
    struct DecodeRun {
        model_sha256: String,
        latent_sha256: String,
    }
    out.finish(
        "decode",
        &DecodeRun { model_sha256: file_digest(&args.model)?, latent_sha256: file_digest(&args.latent)? },
    )?;
    Ok(decoded)
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<crate::eval::BenchmarkReport> {
    let dataset = load_dataset(&args.dataset, None)?;
    let mut config: BenchmarkConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.seeds {
        config.seeds = v.clone();
    }
    if let Some(sigmas) = &args.kde_sigmas {
        config.variants.retain(|v| !matches!(v, Variant::Kde { .. }));
        config.variants.extend(sigmas.iter().map(|&sigma| Variant::Kde { sigma }));
    }
    if let Some(v) = args.iterations {
        config.train.iterations = v;
    }
    if let Some(v) = args.subsample {
        config.subsample = v;
    }
    if let Some(v) = args.resolution {
        config.geodesic.resolution = v;
    }
    let report = benchmark(&dataset, &config)?;
    let mut out = Output::new(&args.out)?;
    out.write("report.json", to_json(&report)?.as_bytes())?;
    out.write("report.md", report.markdown().as_bytes())?;
    out.finish("benchmark", &config)?;
    Ok(report)
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) | Error::Internal(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::MetricGrid(a) => cmd_metric_grid(a).map(drop),
        Command::Geodesic(a) => cmd_geodesic(a).map(drop),
        Command::Decode(a) => cmd_decode(a).map(drop),
        Command::Benchmark(a) => cmd_benchmark(a).map(drop),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
