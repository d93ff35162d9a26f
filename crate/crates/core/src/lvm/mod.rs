//! Multitask GPLVM and wrapped GPLVM on manifold-valued data.

mod kron;
mod model;
mod objective;
mod train;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::BCComponent;
use crate::manifolds::{ManifoldSpec, POINT_TOL};

pub use kron::KronSystem;
pub use model::{BackConstraintState, DynamicsParams, Hyperparameters, LatentModel, ModelParts, Posterior};
pub use objective::{
    change_of_volume, dense_log_likelihood, log_marginal_likelihood, log_prior, MapObjective, ObjectiveTerms,
};
pub use train::{apply_back_constraints, init_pca, tangent_targets, train_map};

/// Manifold-valued observations grouped into contiguous trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub spec: ManifoldSpec,
    pub points: Vec<Vec<f64>>,
    pub trajectory_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(spec: ManifoldSpec, points: Vec<Vec<f64>>, trajectory_ids: Vec<usize>) -> Result<Self> {
        let ds = Self { spec, points, trajectory_ids, timestamps: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.points.is_empty() {
            return Err(Error::Validation("dataset has no points".into()));
        }
        if self.trajectory_ids.len() != self.points.len() {
            return Err(Error::Dimension(format!(
                "{} trajectory ids for {} points",
                self.trajectory_ids.len(),
                self.points.len()
            )));
        }
        if let Some(t) = &self.timestamps {
            if t.len() != self.points.len() {
                return Err(Error::Dimension(format!("{} timestamps for {} points", t.len(), self.points.len())));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            self.spec.check_point(p, POINT_TOL).map_err(|e| Error::Validation(format!("point {i}: {e}")))?;
        }
        let mut seen = std::collections::HashSet::new();
        for r in self.trajectories() {
            if !seen.insert(self.trajectory_ids[r.start]) {
                return Err(Error::Validation(format!(
                    "trajectory {} is not a contiguous index range",
                    self.trajectory_ids[r.start]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index ranges of consecutive points sharing a trajectory id.
    pub fn trajectories(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.trajectory_ids.len() {
            if i == self.trajectory_ids.len() || self.trajectory_ids[i] != self.trajectory_ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// The same data viewed as vectors in the ambient Euclidean space.
    pub fn as_euclidean(&self) -> Dataset {
        Dataset { spec: self.spec.ambient_euclidean(), ..self.clone() }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Validation(format!("index {bad} out of range for {} points", self.len())));
        }
        let ds = Dataset {
            spec: self.spec.clone(),
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            trajectory_ids: indices.iter().map(|&i| self.trajectory_ids[i]).collect(),
            timestamps: self.timestamps.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackConstraintConfig {
    /// One entry per non-product manifold factor; defaults apply when empty.
    pub components: Vec<BCComponent>,
    pub n_max: usize,
}

impl Default for BackConstraintConfig {
    fn default() -> Self {
        Self { components: Vec::new(), n_max: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub gpdm: bool,
    pub gamma_lengthscale_prior: bool,
    pub back_constraints: Option<BackConstraintConfig>,
    /// Rank of the low-rank task factor; the number of tasks when unset.
    pub task_rank: Option<usize>,
    pub per_task_noise: bool,
    /// Fixed noise variance of the GPDM dynamics.
    pub dynamics_noise: f64,
    /// Iterations without improvement before a stall warning.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            iterations: 1000,
            learning_rate: 0.025,
            gpdm: true,
            gamma_lengthscale_prior: true,
            back_constraints: None,
            task_rank: None,
            per_task_noise: false,
            dynamics_noise: 1e-2,
            patience: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.dynamics_noise > 0.0 && self.dynamics_noise.is_finite()) {
            return Err(Error::Validation(format!("dynamics_noise must be positive, got {}", self.dynamics_noise)));
        }
        if self.task_rank == Some(0) {
            return Err(Error::Validation("task_rank must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectories_must_be_contiguous() {
        let spec = ManifoldSpec::Euclidean { dim: 1 };
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let ds = Dataset::new(spec.clone(), pts.clone(), vec![0, 0, 1]).unwrap();
        assert_eq!(ds.trajectories(), vec![0..2, 2..3]);
        assert!(Dataset::new(spec, pts, vec![0, 1, 0]).is_err());
    }

    #[test]
    fn invalid_points_rejected() {
        let spec = ManifoldSpec::Sphere { dim: 1 };
        assert!(Dataset::new(spec, vec![vec![0.6, 0.9]], vec![0]).is_err());
    }
}
