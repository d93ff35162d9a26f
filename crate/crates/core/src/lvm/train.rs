//! Initialization and MAP training.

use nalgebra::{DMatrix, DVector};

use super::model::{BackConstraintState, DynamicsParams, LatentModel, ModelParts};
use super::objective::{change_of_volume, Layout, MapObjective, Unpacked};
use super::{Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::{MultitaskKernel, Noise, RiemannianBCKernel, SEKernel, TaskCovariance};
use crate::linalg::{cholesky, sym_eig};
use crate::optim::Adam;

/// Training sizes above this trigger a warning; nothing is refused.
const DESK_SCALE_POINTS: usize = 400;

/// Tangent coordinates `Log_b(y_i)` of every data point, one row per point.
pub fn tangent_targets(dataset: &Dataset, basepoint: &[f64]) -> Result<DMatrix<f64>> {
    let m = dataset.spec.intrinsic_dim();
    let mut v = DMatrix::zeros(dataset.len(), m);
    for (i, p) in dataset.points.iter().enumerate() {
        let c = dataset.spec.log(basepoint, p)?;
        v.row_mut(i).copy_from_slice(&c);
    }
    Ok(v)
}

fn column_mean(v: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(v.ncols(), |j, _| v.column(j).mean())
}

fn center(v: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] - mean[j])
}

/// Principal-component latent initialization at the default basepoint, with
/// unit-variance columns.
pub fn init_pca(dataset: &Dataset, q: usize) -> Result<DMatrix<f64>> {
    dataset.validate()?;
    let raw = tangent_targets(dataset, &dataset.spec.default_basepoint())?;
    pca_latent(&center(&raw, &column_mean(&raw)), q)
}

pub(crate) fn pca_latent(v: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let (n, m) = (v.nrows(), v.ncols());
    if n <= q {
        return Err(Error::Validation(format!("PCA needs more points ({n}) than latent dimensions ({q})")));
    }
    if q > m {
        return Err(Error::Validation(format!("latent dimension {q} exceeds the data dimension {m}")));
    }
    let cov = v.transpose() * v / n as f64;
    let (vals, vecs) = sym_eig(&cov);
    let total: f64 = vals.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::Validation("degenerate data: tangent targets have zero variance".into()));
    }
    let mut dirs = DMatrix::zeros(m, q);
    for k in 0..q {
        let mut col = vecs.column(m - 1 - k).into_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        dirs.set_column(k, &col);
    }
    let mut x = v * dirs;
    for k in 0..q {
        let sd = (x.column(k).norm_squared() / n as f64).sqrt();
        if !(sd > 1e-12 * total.sqrt()) {
            return Err(Error::Validation(format!("degenerate data: principal direction {k} has no variance")));
        }
        x.column_mut(k).scale_mut(1.0 / sd);
    }
    Ok(x)
}

/// Back-constraint kernel matrix `[k^M(y_i, y_j)]` of a dataset.
pub(crate) fn bc_features(kernel: &RiemannianBCKernel, dataset: &Dataset) -> Result<DMatrix<f64>> {
    if kernel.spec != dataset.spec {
        return Err(Error::Dimension("back-constraint kernel spec differs from the dataset spec".into()));
    }
    kernel.matrix(&dataset.points)
}

/// `X_{i,q} = Σ_j W_{q,j} k^M(y_i, y_j)` for `W` of shape `Q × N`.
pub fn apply_back_constraints(
    w: &DMatrix<f64>,
    kernel: &RiemannianBCKernel,
    dataset: &Dataset,
) -> Result<DMatrix<f64>> {
    if w.ncols() != dataset.len() {
        return Err(Error::Dimension(format!("W has {} columns for {} data points", w.ncols(), dataset.len())));
    }
    Ok(bc_features(kernel, dataset)? * w.transpose())
}

pub(crate) struct Setup {
    pub objective: MapObjective,
    pub initial: Vec<f64>,
    pub basepoint: Vec<f64>,
    pub tangent_mean: DVector<f64>,
    pub bc_kernel: Option<RiemannianBCKernel>,
}

pub(crate) fn setup(dataset: &Dataset, config: &TrainConfig) -> Result<Setup> {
    dataset.validate()?;
    config.validate()?;
    if dataset.len() > DESK_SCALE_POINTS {
        log::warn!("training on {} points; runs are sized for at most {DESK_SCALE_POINTS}", dataset.len());
    }
    let spec = &dataset.spec;
    let (n, m, q) = (dataset.len(), spec.intrinsic_dim(), config.latent_dim);
    let basepoint = spec.default_basepoint();
    let raw = tangent_targets(dataset, &basepoint)?;
    let tangent_mean = column_mean(&raw);
    let targets = center(&raw, &tangent_mean);
    let x0 = pca_latent(&targets, q)?;

    let (bc_kernel, bc_matrix, z0) = match &config.back_constraints {
        Some(bc) => {
            let kernel = if bc.components.is_empty() {
                RiemannianBCKernel { n_max: bc.n_max, ..RiemannianBCKernel::with_defaults(spec.clone()) }
            } else {
                RiemannianBCKernel::new(spec.clone(), bc.components.clone(), bc.n_max)?
            };
            let k = bc_features(&kernel, dataset)?;
            let scale = k.diagonal().mean();
            let mut reg = k.clone();
            for i in 0..n {
                reg[(i, i)] += 1e-6 * scale;
            }
            let w_t = cholesky(&reg, "back-constraint kernel")?.solve(&x0);
            (Some(kernel), Some(k), w_t)
        }
        None => (None, None, x0),
    };

    let cov = targets.transpose() * &targets / n as f64;
    let rank = config.task_rank.unwrap_or(m);
    let (vals, vecs) = sym_eig(&cov);
    let mut b = DMatrix::zeros(m, rank);
    for k in 0..rank.min(m) {
        let scale = (0.9 * vals[m - 1 - k].max(0.0)).sqrt();
        b.set_column(k, &(vecs.column(m - 1 - k) * scale));
    }
    let bbt = &b * b.transpose();
    let mean_var = cov.diagonal().mean();
    let v = DVector::from_fn(m, |i, _| {
        let floor = (0.1 * cov[(i, i)]).max(1e-6 * mean_var).max(1e-12);
        (cov[(i, i)] - bbt[(i, i)]).max(floor)
    });
    let noise: Vec<f64> = if config.per_task_noise {
        (0..m).map(|i| (1e-2 * cov[(i, i)]).max(1e-6 * mean_var).max(1e-12)).collect()
    } else {
        vec![(1e-2 * mean_var).max(1e-12); 1]
    };
    let layout = Layout { n, q, m, rank, noise_params: if config.per_task_noise { m } else { 1 }, gpdm: config.gpdm };
    let unpacked = Unpacked {
        z: z0,
        latent: SEKernel::new(1.0, 1.0)?,
        task: TaskCovariance::new(b, v)?,
        noise,
        dynamics: config.gpdm.then_some(SEKernel { lengthscale: 1.0, variance: 1.0 }),
    };
    let initial = layout.pack(&unpacked);
    let objective = MapObjective {
        layout,
        targets,
        trajectories: dataset.trajectories(),
        bc_features: bc_matrix,
        gamma_prior: config.gamma_lengthscale_prior,
        dynamics_noise: config.dynamics_noise,
        change_of_volume: change_of_volume(spec, &basepoint, &raw)?,
    };
    Ok(Setup { objective, initial, basepoint, tangent_mean, bc_kernel })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("iteration {it}: {msg}")),
        other => other,
    }
}

/// Maximizes the MAP objective over latent variables (or back-constraint
/// weights) and hyperparameters.
pub fn train_map(dataset: &Dataset, config: &TrainConfig) -> Result<LatentModel> {
    let s = setup(dataset, config)?;
    let obj = &s.objective;
    let mut params = s.initial.clone();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut best = f64::NEG_INFINITY;
    let mut stalled = 0;
    let mut warned = false;
    for it in 0..config.iterations {
        let (value, grad) = obj.value_and_gradient(&params).map_err(|e| at_iteration(e, it))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("objective became non-finite at iteration {it}")));
        }
        trace.push(value);
        if value > best + 1e-9 * best.abs().max(1.0) {
            best = value;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.patience && !warned {
                log::warn!("objective has not improved for {stalled} iterations (iteration {it})");
                warned = true;
            }
        }
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &descent);
    }
    let final_value = obj.value(&params).map_err(|e| at_iteration(e, config.iterations))?;
    if !final_value.is_finite() {
        return Err(Error::Numerical(format!("objective became non-finite at iteration {}", config.iterations)));
    }
    trace.push(final_value);
    log::info!("training finished: objective {final_value:.6} after {} iterations", config.iterations);

    let u = obj.layout.unpack(&params)?;
    let latent = obj.latent(&params)?;
    let noise = if config.per_task_noise { Noise::PerTask(u.noise.clone()) } else { Noise::Shared(u.noise[0]) };
    let back_constraints = s.bc_kernel.map(|kernel| BackConstraintState { kernel, weights: u.z.transpose() });
    let dynamics =
        u.dynamics.map(|d| DynamicsParams { theta: d.lengthscale, sigma2: d.variance, noise: config.dynamics_noise });
    LatentModel::from_parts(ModelParts {
        spec: dataset.spec.clone(),
        latent,
        targets: obj.targets.clone(),
        kernel: MultitaskKernel { latent: u.latent, task: u.task, noise },
        basepoint: s.basepoint,
        tangent_mean: s.tangent_mean,
        dynamics,
        back_constraints,
        config: config.clone(),
        objective_trace: trace,
        trajectory_ids: dataset.trajectory_ids.clone(),
    })
}
