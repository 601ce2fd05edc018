//! M-step sub-updates and fitting configuration.

mod init;
mod lambda;
mod sigma;
mod stage;
mod trajectory;

use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::optim::BfgsOptions;

pub use init::{initialize, initialize_severity, initialize_with, initialize_with_labels, severity_stages, kmeans, KMeansResult};
pub use lambda::{fit_lambda, lambda_objective, zeta, zeta_matrix, LambdaFit};
pub use sigma::{update_sigma, SIGMA_FLOOR};
pub use stage::{fit_stage, fit_stage_with, stage_objective_slow, SlowStageLoss, StageFit, StageLoss};
pub(crate) use init::build_state_with_stages;
pub(crate) use stage::combine_cluster_terms;
pub(crate) use trajectory::{linear_fit_from_totals, row_dps};
pub use trajectory::{
    fit_trajectory, fit_trajectory_with, trajectory_objective_slow, SlowTrajectoryLoss,
    TrajectoryFit, TrajectoryLoss,
};

/// Candidate grid for the MRF strength, refined by golden-section search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub refine: bool,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 5.0,
            points: 51,
            refine: true,
        }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of clusters.
    pub k: usize,
    pub max_outer_iters: usize,
    /// Relative objective change that stops the outer loop.
    pub tol: f64,
    /// Starting points for each trajectory fit (the current value counts as one).
    pub theta_starts: usize,
    pub lambda_grid: LambdaGrid,
    pub kmeans_restarts: usize,
    pub seed: u64,
    /// Use weighted cluster means for the trajectory and stage updates.
    pub fast: bool,
    /// Record the objective after every sub-step (costs one E-step pass each).
    pub track_substeps: bool,
    pub optimizer_max_iters: usize,
    pub optimizer_grad_tol: f64,
    /// Also run the loop from data-driven severity stages and keep the
    /// start that ends with the higher objective.
    pub severity_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 3,
            max_outer_iters: 100,
            tol: 1e-6,
            theta_starts: 5,
            lambda_grid: LambdaGrid::default(),
            kmeans_restarts: 10,
            seed: 0,
            fast: true,
            track_substeps: true,
            optimizer_max_iters: 400,
            optimizer_grad_tol: 1e-11,
            severity_start: true,
        }
    }
}

impl FitConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DiveError::Config("k must be >= 1".into()));
        }
        if self.max_outer_iters == 0 || self.theta_starts == 0 || self.kmeans_restarts == 0 {
            return Err(DiveError::Config(
                "iteration, start and restart counts must be >= 1".into(),
            ));
        }
        if !(self.tol > 0.0) || !(self.optimizer_grad_tol > 0.0) {
            return Err(DiveError::Config("tolerances must be > 0".into()));
        }
        let g = &self.lambda_grid;
        if g.points == 0 || !(g.min >= 0.0) || !(g.max >= g.min) || !g.max.is_finite() {
            return Err(DiveError::Config(format!("invalid lambda grid {g:?}")));
        }
        Ok(())
    }

    pub fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            max_iters: self.optimizer_max_iters,
            grad_tol: self.optimizer_grad_tol,
            ..BfgsOptions::default()
        }
    }
}
