//! Cluster-mean formulation of the trajectory and stage updates.
//!
//! With `γ_k = 1 / Σ_l z_lk` and `⟨V_r⟩_k = γ_k Σ_l z_lk V_rl`, the vertex
//! sums collapse: `Σ_l z_lk (V_rl - f)² = γ_k⁻¹ (⟨V_r⟩_k - f)² + const`.
//! The fast losses therefore have the same minimizers as the slow ones at
//! `O(rows)` instead of `O(rows · L)` per evaluation.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::model::{ModelState, SubjectStage};
use crate::mstep::{
    fit_stage_with, fit_trajectory_with, SlowStageLoss, SlowTrajectoryLoss, StageFit, StageLoss,
    TrajectoryFit, TrajectoryLoss,
};
use crate::optim::BfgsOptions;
use crate::priors::{StagePrior, ThetaPrior};
use crate::sigmoid::{sigmoid_grad, TrajectoryParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMeans {
    /// `rows × K` posterior-weighted vertex means.
    pub means: Array2<f64>,
    /// Inverse cluster masses; `+∞` for a cluster without mass.
    pub gammas: Vec<f64>,
}

impl ClusterMeans {
    /// Cluster mass `γ_k⁻¹` (zero for an empty cluster).
    pub fn mass(&self, k: usize) -> f64 {
        1.0 / self.gammas[k]
    }
}

/// Exact weighted means; errors if any cluster has zero mass.
pub fn weighted_cluster_means(data: &Dataset, posteriors: &Array2<f64>) -> Result<ClusterMeans> {
    let means = cluster_means_lenient(data, posteriors);
    if let Some(k) = means.gammas.iter().position(|g| !g.is_finite()) {
        return Err(DiveError::DegenerateCluster(k));
    }
    Ok(means)
}

/// As [`weighted_cluster_means`] but empty clusters get zero means and
/// `γ = ∞`, so they drop out of every fast loss.
pub(crate) fn cluster_means_lenient(data: &Dataset, posteriors: &Array2<f64>) -> ClusterMeans {
    let k = posteriors.ncols();
    let masses: Vec<f64> = posteriors.columns().into_iter().map(|c| c.sum()).collect();
    let gammas: Vec<f64> = masses
        .iter()
        .map(|&m| if m > 0.0 { 1.0 / m } else { f64::INFINITY })
        .collect();
    let values = data.values();
    let flat: Vec<f64> = (0..data.n_rows())
        .into_par_iter()
        .flat_map_iter(|r| {
            let v = values.row(r);
            (0..k)
                .map(|c| {
                    if gammas[c].is_finite() {
                        gammas[c] * v.iter().zip(posteriors.column(c)).map(|(a, z)| a * z).sum::<f64>()
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let means = Array2::from_shape_vec((data.n_rows(), k), flat).expect("rows x k");
    ClusterMeans { means, gammas }
}

/// `Σ_r (⟨V_r⟩_k - f(dps_r; θ))²` for one cluster.
pub struct FastTrajectoryLoss {
    targets: Vec<f64>,
    dps: Vec<f64>,
}

impl FastTrajectoryLoss {
    pub fn new(k: usize, data: &Dataset, means: &ClusterMeans, stages: &[SubjectStage]) -> Self {
        Self {
            targets: means.means.column(k).to_vec(),
            dps: crate::mstep::row_dps(data, stages),
        }
    }
}

impl TrajectoryLoss for FastTrajectoryLoss {
    fn value_grad(&self, theta: &TrajectoryParams) -> (f64, [f64; 4]) {
        let mut value = 0.0;
        let mut grad = [0.0; 4];
        for (&y, &s) in self.targets.iter().zip(&self.dps) {
            let e = y - theta.eval(s);
            value += e * e;
            let g = sigmoid_grad(s, theta).theta();
            for p in 0..4 {
                grad[p] -= 2.0 * e * g[p];
            }
        }
        (value, grad)
    }

    fn linear_fit(&self, b: f64, c: f64) -> Option<(f64, f64)> {
        crate::mstep::linear_fit_from_totals(&self.dps, 1.0, &self.targets, b, c)
    }
}

/// Fast trajectory update. The fast loss is scaled by `γ_k⁻¹ / (2σ_k²)` so
/// the maximized value differs from the slow objective only by a constant,
/// which keeps the trade-off against `log p(θ)` identical.
#[allow(clippy::too_many_arguments)]
pub fn fit_trajectory_fast(
    k: usize,
    data: &Dataset,
    means: &ClusterMeans,
    stages: &[SubjectStage],
    sigma_k: f64,
    prior: &ThetaPrior,
    init: TrajectoryParams,
    starts: usize,
    opts: &BfgsOptions,
) -> TrajectoryFit {
    let loss = FastTrajectoryLoss::new(k, data, means, stages);
    let scale = means.mass(k) * 0.5 / (sigma_k * sigma_k);
    fit_trajectory_with(&loss, scale, prior, init, starts, opts)
}

/// `Σ_k γ_k⁻¹ / (2σ_k²) Σ_j (⟨V_j⟩_k - f(dps_j; θ_k))²` for one subject.
pub struct FastStageLoss<'a> {
    targets: Vec<Vec<f64>>,
    ages: Vec<f64>,
    trajectories: &'a [TrajectoryParams],
    weights: Vec<f64>,
}

impl<'a> FastStageLoss<'a> {
    pub fn new(
        rows: &[usize],
        ages: &[f64],
        means: &ClusterMeans,
        trajectories: &'a [TrajectoryParams],
        sigmas: &[f64],
    ) -> Self {
        let k = trajectories.len();
        Self {
            targets: (0..k)
                .map(|c| rows.iter().map(|&r| means.means[[r, c]]).collect())
                .collect(),
            ages: ages.to_vec(),
            trajectories,
            weights: (0..k)
                .map(|c| means.mass(c) * 0.5 / (sigmas[c] * sigmas[c]))
                .collect(),
        }
    }
}

impl StageLoss for FastStageLoss<'_> {
    fn ages(&self) -> &[f64] {
        &self.ages
    }

    fn trajectories(&self) -> &[TrajectoryParams] {
        self.trajectories
    }

    fn value_grad(&self, dps: &[f64]) -> (f64, Vec<f64>) {
        let terms: Vec<(f64, Vec<f64>)> = self
            .trajectories
            .iter()
            .enumerate()
            .map(|(k, theta)| {
                let w = self.weights[k];
                if w == 0.0 {
                    return (0.0, vec![0.0; dps.len()]);
                }
                let mut value = 0.0;
                let mut grad = Vec::with_capacity(dps.len());
                for (&y, &s) in self.targets[k].iter().zip(dps) {
                    let e = y - theta.eval(s);
                    value += w * e * e;
                    grad.push(-2.0 * w * e * sigmoid_grad(s, theta).ds);
                }
                (value, grad)
            })
            .collect();
        crate::mstep::combine_cluster_terms(&terms, dps.len())
    }
}

/// Fast stage update for subject `i` using the rows in `rows` (a subset of
/// the subject's visits, or all of them).
#[allow(clippy::too_many_arguments)]
pub fn fit_stage_fast(
    data: &Dataset,
    rows: &[usize],
    means: &ClusterMeans,
    trajectories: &[TrajectoryParams],
    sigmas: &[f64],
    prior: &StagePrior,
    init: SubjectStage,
    opts: &BfgsOptions,
) -> Result<StageFit> {
    let ages: Vec<f64> = rows.iter().map(|&r| data.age(r)).collect();
    let loss = FastStageLoss::new(rows, &ages, means, trajectories, sigmas);
    fit_stage_with(&loss, prior, init, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    /// Per cluster: `|∇θ l_fast - γ_k ∇θ l_slow|` relative to the summed
    /// magnitude of the gradient terms.
    pub theta_deviation: Vec<f64>,
    /// Per subject: the same comparison for the `(α, β)` gradient.
    pub stage_deviation: Vec<f64>,
    pub max_theta_deviation: f64,
    pub max_stage_deviation: f64,
    pub passed: bool,
}

fn relative_deviation(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else if *s > 0.0 {
                d / s
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Compares fast and slow gradients at the model's current parameters.
pub fn audit_equivalence(data: &Dataset, model: &ModelState, tol: f64) -> EquivalenceReport {
    let means = cluster_means_lenient(data, &model.posteriors);
    audit_with_means(data, model, &means, tol)
}

/// Audit against caller-supplied means, e.g. deliberately corrupted ones.
pub fn audit_with_means(
    data: &Dataset,
    model: &ModelState,
    means: &ClusterMeans,
    tol: f64,
) -> EquivalenceReport {
    let values = data.values();
    let dps = crate::mstep::row_dps(data, &model.stages);
    let theta_deviation: Vec<f64> = (0..model.k())
        .into_par_iter()
        .map(|k| {
            let gamma = means.gammas[k];
            if !gamma.is_finite() {
                return 0.0;
            }
            let theta = &model.trajectories[k];
            let fast = FastTrajectoryLoss::new(k, data, means, &model.stages).value_grad(theta).1;
            let slow = SlowTrajectoryLoss::new(data, model.posteriors.column(k), &model.stages)
                .value_grad(theta)
                .1;
            let scaled: Vec<f64> = slow.iter().map(|g| gamma * g).collect();
            // rounding scale: magnitudes of every summed term on either side
            let mut scale = [0.0; 4];
            for (r, &s) in dps.iter().enumerate() {
                let f = theta.eval(s);
                let abs_resid: f64 = values
                    .row(r)
                    .iter()
                    .zip(model.posteriors.column(k))
                    .map(|(v, z)| z * (v - f).abs())
                    .sum();
                let fast_resid = (means.means[[r, k]] - f).abs();
                let g = sigmoid_grad(s, theta).theta();
                for p in 0..4 {
                    scale[p] += 2.0 * (gamma * abs_resid + fast_resid) * g[p].abs();
                }
            }
            relative_deviation(&fast, &scaled, &scale)
        })
        .collect();

    let stage_deviation: Vec<f64> = (0..data.n_subjects())
        .into_par_iter()
        .map(|i| {
            let rows = data.subject_rows(i);
            let stage = model.stages[i];
            let ages: Vec<f64> = rows.iter().map(|&r| data.age(r)).collect();
            let sdps: Vec<f64> = ages.iter().map(|&t| stage.dps(t)).collect();
            let fast = FastStageLoss::new(rows, &ages, means, &model.trajectories, &model.sigmas);
            let slow = SlowStageLoss::new(data, rows, &model.posteriors, &model.trajectories, &model.sigmas);
            let to_ab = |g: Vec<f64>| {
                let da: f64 = g.iter().zip(&ages).map(|(gj, t)| gj * t).sum();
                let db: f64 = g.iter().sum();
                [da, db]
            };
            let gf = to_ab(fast.value_grad(&sdps).1);
            let gs = to_ab(slow.value_grad(&sdps).1);
            let mut scale = [0.0; 2];
            for (j, &r) in rows.iter().enumerate() {
                for (k, theta) in model.trajectories.iter().enumerate() {
                    let w = 0.5 / (model.sigmas[k] * model.sigmas[k]);
                    let f = theta.eval(sdps[j]);
                    let ds = sigmoid_grad(sdps[j], theta).ds.abs();
                    let abs_resid: f64 = values
                        .row(r)
                        .iter()
                        .zip(model.posteriors.column(k))
                        .map(|(v, z)| z * (v - f).abs())
                        .sum();
                    let fast_resid = if means.gammas[k].is_finite() {
                        means.mass(k) * (means.means[[r, k]] - f).abs()
                    } else {
                        0.0
                    };
                    let term = 2.0 * w * (abs_resid + fast_resid) * ds;
                    scale[0] += term * ages[j].abs();
                    scale[1] += term;
                }
            }
            relative_deviation(&gf, &gs, &scale)
        })
        .collect();

    let max_theta_deviation = theta_deviation.iter().copied().fold(0.0, f64::max);
    let max_stage_deviation = stage_deviation.iter().copied().fold(0.0, f64::max);
    EquivalenceReport {
        tolerance: tol,
        passed: max_theta_deviation < tol && max_stage_deviation < tol,
        theta_deviation,
        stage_deviation,
        max_theta_deviation,
        max_stage_deviation,
    }
}
