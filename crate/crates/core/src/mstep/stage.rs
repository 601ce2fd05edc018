//! Per-subject staging update.
//!
//! Minimizes `Σ_k 1/(2σ_k²) Σ_l z_lk Σ_j (V_l^{ij} - f(α t_ij + β; θ_k))² - log p(α, β)`.
//! The search runs over `(log α, s̄)` where `s̄` is the DPS at the subject's
//! mean visit age, which keeps `α > 0` and decorrelates the two directions.

use ndarray::Array2;

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::model::SubjectStage;
use crate::numeric::canonical_sum;
use crate::optim::{bfgs, BfgsOptions};
use crate::priors::StagePrior;
use crate::sigmoid::{sigmoid_grad, TrajectoryParams};

/// Squared-residual loss of one subject as a function of its visit DPS values.
pub trait StageLoss: Sync {
    fn ages(&self) -> &[f64];

    /// Loss and its derivative with respect to each visit's DPS.
    fn value_grad(&self, dps: &[f64]) -> (f64, Vec<f64>);

    fn trajectories(&self) -> &[TrajectoryParams];
}

/// Sums per-cluster `(value, per-row derivative)` terms in canonical order.
pub(crate) fn combine_cluster_terms(terms: &[(f64, Vec<f64>)], n_rows: usize) -> (f64, Vec<f64>) {
    let mut buf: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let value = canonical_sum(&mut buf);
    let grad = (0..n_rows)
        .map(|j| {
            buf.clear();
            buf.extend(terms.iter().map(|t| t.1[j]));
            canonical_sum(&mut buf)
        })
        .collect();
    (value, grad)
}

/// Vertex-level loss evaluated literally over `L` vertices.
pub struct SlowStageLoss<'a> {
    data: &'a Dataset,
    rows: Vec<usize>,
    ages: Vec<f64>,
    posteriors: &'a Array2<f64>,
    trajectories: &'a [TrajectoryParams],
    weights: Vec<f64>,
}

impl<'a> SlowStageLoss<'a> {
    pub fn new(
        data: &'a Dataset,
        rows: &[usize],
        posteriors: &'a Array2<f64>,
        trajectories: &'a [TrajectoryParams],
        sigmas: &[f64],
    ) -> Self {
        Self {
            data,
            rows: rows.to_vec(),
            ages: rows.iter().map(|&r| data.age(r)).collect(),
            posteriors,
            trajectories,
            weights: sigmas.iter().map(|s| 0.5 / (s * s)).collect(),
        }
    }
}

impl StageLoss for SlowStageLoss<'_> {
    fn ages(&self) -> &[f64] {
        &self.ages
    }

    fn trajectories(&self) -> &[TrajectoryParams] {
        self.trajectories
    }

    fn value_grad(&self, dps: &[f64]) -> (f64, Vec<f64>) {
        let values = self.data.values();
        let terms: Vec<(f64, Vec<f64>)> = self
            .trajectories
            .iter()
            .enumerate()
            .map(|(k, theta)| {
                let z = self.posteriors.column(k);
                let w = self.weights[k];
                let mut value = 0.0;
                let mut grad = Vec::with_capacity(self.rows.len());
                for (&r, &s) in self.rows.iter().zip(dps) {
                    let f = theta.eval(s);
                    let mut sq = 0.0;
                    let mut resid = 0.0;
                    for (&v, &zl) in values.row(r).iter().zip(z.iter()) {
                        let e = v - f;
                        sq += zl * e * e;
                        resid += zl * e;
                    }
                    value += w * sq;
                    grad.push(-2.0 * w * resid * sigmoid_grad(s, theta).ds);
                }
                (value, grad)
            })
            .collect();
        combine_cluster_terms(&terms, self.rows.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFit {
    pub stage: SubjectStage,
    /// Minimized `loss - log p(α, β)` at `stage`.
    pub objective: f64,
    pub init_objective: f64,
    pub progressed: bool,
}

/// Multi-start minimization; never returns a stage worse than `init`.
pub fn fit_stage_with<L: StageLoss + ?Sized>(
    loss: &L,
    prior: &StagePrior,
    init: SubjectStage,
    opts: &BfgsOptions,
) -> Result<StageFit> {
    let ages = loss.ages();
    if ages.is_empty() {
        return Err(DiveError::InvalidDataset("subject has no visits".into()));
    }
    let centre_age = ages.iter().sum::<f64>() / ages.len() as f64;
    let offsets: Vec<f64> = ages.iter().map(|t| t - centre_age).collect();

    let to_stage = |x: &[f64; 2]| {
        let alpha = x[0].exp();
        SubjectStage {
            alpha,
            beta: x[1] - alpha * centre_age,
        }
    };
    let neg_objective = |x: &[f64; 2]| {
        let alpha = x[0].exp();
        let stage = to_stage(x);
        if !(alpha > 0.0 && alpha.is_finite()) {
            return (f64::INFINITY, [0.0; 2]);
        }
        let dps: Vec<f64> = offsets.iter().map(|o| alpha * o + x[1]).collect();
        let (v, g) = loss.value_grad(&dps);
        let d_log_alpha: f64 = g.iter().zip(&offsets).map(|(gj, o)| gj * o).sum::<f64>() * alpha;
        let d_centre: f64 = g.iter().sum();
        let [pa, pb] = prior.grad(&stage);
        let f = v - prior.log_density(&stage);
        // beta = centre - alpha * t̄, so d beta / d log alpha = -alpha t̄
        let prior_log_alpha = alpha * pa - alpha * centre_age * pb;
        (f, [d_log_alpha - prior_log_alpha, d_centre - pb])
    };

    let x_init = [init.alpha.ln(), init.dps(centre_age)];
    let init_value = neg_objective(&x_init).0;

    // Coarse scan of the centre DPS around every trajectory's transition.
    let mut anchors: Vec<f64> = vec![x_init[1]];
    for t in loss.trajectories() {
        let w = if t.b != 0.0 { 1.0 / t.b.abs() } else { 1.0 };
        for m in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            anchors.push(t.c + m * w);
        }
    }
    let mut scored: Vec<(f64, f64)> = anchors
        .into_iter()
        .filter(|a| a.is_finite())
        .map(|a| (neg_objective(&[x_init[0], a]).0, a))
        .collect();
    scored.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));

    let mut best = (x_init, init_value);
    let mut starts = vec![x_init];
    if let Some(&(_, a)) = scored.first() {
        if a != x_init[1] {
            starts.push([x_init[0], a]);
        }
    }
    for x0 in starts {
        let m = bfgs(neg_objective, x0, opts);
        if m.f.is_finite() && m.f < best.1 && m.x.iter().all(|v| v.is_finite()) {
            best = (m.x, m.f);
        }
    }
    let stage = to_stage(&best.0);
    if !(stage.alpha > 0.0 && stage.alpha.is_finite() && stage.beta.is_finite()) {
        return Ok(StageFit {
            stage: init,
            objective: init_value,
            init_objective: init_value,
            progressed: false,
        });
    }
    Ok(StageFit {
        stage,
        objective: best.1,
        init_objective: init_value,
        progressed: best.1 < init_value,
    })
}

/// Slow-path stage update for subject `i` over all of its visits.
#[allow(clippy::too_many_arguments)]
pub fn fit_stage(
    i: usize,
    data: &Dataset,
    posteriors: &Array2<f64>,
    trajectories: &[TrajectoryParams],
    sigmas: &[f64],
    prior: &StagePrior,
    init: SubjectStage,
    opts: &BfgsOptions,
) -> Result<StageFit> {
    let loss = SlowStageLoss::new(data, data.subject_rows(i), posteriors, trajectories, sigmas);
    fit_stage_with(&loss, prior, init, opts)
}

/// Slow stage objective in maximization form, `-loss + log p(α, β)`.
pub fn stage_objective_slow(
    i: usize,
    data: &Dataset,
    posteriors: &Array2<f64>,
    trajectories: &[TrajectoryParams],
    sigmas: &[f64],
    prior: &StagePrior,
    stage: &SubjectStage,
) -> f64 {
    let loss = SlowStageLoss::new(data, data.subject_rows(i), posteriors, trajectories, sigmas);
    let dps: Vec<f64> = loss.ages().iter().map(|&t| stage.dps(t)).collect();
    -loss.value_grad(&dps).0 + prior.log_density(stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Adjacency, Observation};
    use ndarray::Array2;

    fn subject_data(truth: SubjectStage, thetas: &[TrajectoryParams], labels: &[usize], ages: &[f64]) -> Dataset {
        let rows: Vec<Observation> = ages
            .iter()
            .enumerate()
            .map(|(j, &a)| Observation {
                subject: 0,
                visit: j as u64,
                age: a,
            })
            .collect();
        let values = Array2::from_shape_fn((ages.len(), labels.len()), |(r, l)| {
            thetas[labels[l]].eval(truth.dps(ages[r]))
        });
        Dataset::new(values, rows, Adjacency::grid(labels.len(), 1)).unwrap()
    }

    #[test]
    fn recovers_noise_free_stage() {
        let thetas = [
            TrajectoryParams::new(1.0, 1.5, -1.0, 0.0),
            TrajectoryParams::new(2.0, 1.0, 1.0, -0.5),
        ];
        let labels = [0, 0, 1, 1, 0];
        let truth = SubjectStage::new(0.3, -21.0).unwrap();
        let ages = [68.0, 69.0, 70.5, 72.0];
        let data = subject_data(truth, &thetas, &labels, &ages);
        let z = crate::model::one_hot(&labels, 2).unwrap();
        let fit = fit_stage(
            0,
            &data,
            &z,
            &thetas,
            &[0.1, 0.1],
            &StagePrior::Uniform,
            SubjectStage::new(0.2, -14.0).unwrap(),
            &BfgsOptions::default(),
        )
        .unwrap();
        for &t in &ages {
            assert!((fit.stage.dps(t) - truth.dps(t)).abs() < 1e-3, "{:?}", fit.stage);
        }
    }

    #[test]
    fn single_visit_reaches_zero_loss() {
        let thetas = [TrajectoryParams::new(1.0, 1.0, 0.0, 0.0)];
        let truth = SubjectStage::new(1.0, -70.4).unwrap();
        let data = subject_data(truth, &thetas, &[0, 0], &[70.0]);
        let z = Array2::ones((2, 1));
        let fit = fit_stage(
            0,
            &data,
            &z,
            &thetas,
            &[1.0],
            &StagePrior::Uniform,
            SubjectStage::new(1.0, -72.0).unwrap(),
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(fit.objective.abs() < 1e-9, "{}", fit.objective);
    }

    #[test]
    fn never_worse_than_init() {
        let thetas = [
            TrajectoryParams::new(1.0, 2.0, -1.0, 0.0),
            TrajectoryParams::new(-1.0, 0.5, 2.0, 1.0),
        ];
        let labels = [0, 1, 1];
        let data = subject_data(SubjectStage::new(1.0, -70.0).unwrap(), &thetas, &labels, &[69.0, 71.0, 74.0]);
        let z = ndarray::array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]];
        for init in [(0.5, -30.0), (2.0, -140.0), (1.0, -68.0)] {
            let init = SubjectStage::new(init.0, init.1).unwrap();
            let prior = StagePrior::Gaussian {
                log_alpha_mean: 0.0,
                log_alpha_sd: 0.5,
                beta_mean: -70.0,
                beta_sd: 10.0,
            };
            let fit = fit_stage(0, &data, &z, &thetas, &[0.3, 0.6], &prior, init, &BfgsOptions::default()).unwrap();
            let before = stage_objective_slow(0, &data, &z, &thetas, &[0.3, 0.6], &prior, &init);
            let after = stage_objective_slow(0, &data, &z, &thetas, &[0.3, 0.6], &prior, &fit.stage);
            assert!(after >= before);
            assert!(fit.stage.alpha > 0.0);
        }
    }
}
