//! Trajectory-shape update for one cluster.
//!
//! Maximizes `-Σ_l z_lk Σ_r (V_rl - f(dps_r; θ))² / (2σ_k²) + log p(θ)`
//! by multi-start BFGS on `(a, b, c, d)` with analytic gradients.

use ndarray::{Array2, ArrayView1};

use crate::dataset::Dataset;
use crate::model::SubjectStage;
use crate::optim::{bfgs, BfgsOptions};
use crate::priors::ThetaPrior;
use crate::sigmoid::{sigmoid_grad, TrajectoryParams};

/// Weighted squared-residual loss of one trajectory.
pub trait TrajectoryLoss: Sync {
    /// Loss value and gradient with respect to `(a, b, c, d)`.
    fn value_grad(&self, theta: &TrajectoryParams) -> (f64, [f64; 4]);

    /// Best `(a, d)` for a fixed `(b, c)`; `None` when the system is singular.
    fn linear_fit(&self, b: f64, c: f64) -> Option<(f64, f64)>;

    fn value(&self, theta: &TrajectoryParams) -> f64 {
        self.value_grad(theta).0
    }
}

/// Closed-form `(a, d)` for `Σ_r [W (d + a g_r)² - 2 (d + a g_r) Y_r]`,
/// where `W` is the total weight and `Y_r` the weighted row sums.
pub(crate) fn linear_fit_from_totals(
    dps: &[f64],
    weight: f64,
    targets: &[f64],
    b: f64,
    c: f64,
) -> Option<(f64, f64)> {
    if !(weight > 0.0) {
        return None;
    }
    let probe = TrajectoryParams::new(1.0, b, c, 0.0);
    let (mut n, mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&s, &y) in dps.iter().zip(targets) {
        let g = probe.eval(s);
        n += weight;
        sg += weight * g;
        sgg += weight * g * g;
        sy += y;
        sgy += g * y;
    }
    let det = n * sgg - sg * sg;
    if !(det > 1e-12 * n * n) {
        return None;
    }
    let d = (sgg * sy - sg * sgy) / det;
    let a = (n * sgy - sg * sy) / det;
    (a.is_finite() && d.is_finite()).then_some((a, d))
}

/// Per-vertex loss `Σ_l z_lk Σ_r (V_rl - f(dps_r))²`, evaluated literally.
pub struct SlowTrajectoryLoss<'a> {
    values: &'a Array2<f64>,
    weights: Vec<f64>,
    dps: Vec<f64>,
    weight_total: f64,
    row_totals: Vec<f64>,
}

impl<'a> SlowTrajectoryLoss<'a> {
    pub fn new(data: &'a Dataset, weights: ArrayView1<'_, f64>, stages: &[SubjectStage]) -> Self {
        let weights = weights.to_vec();
        let dps = row_dps(data, stages);
        let values = data.values();
        let row_totals = values
            .outer_iter()
            .map(|row| row.iter().zip(&weights).map(|(v, z)| v * z).sum())
            .collect();
        Self {
            values,
            weight_total: weights.iter().sum(),
            weights,
            dps,
            row_totals,
        }
    }
}

impl TrajectoryLoss for SlowTrajectoryLoss<'_> {
    fn value_grad(&self, theta: &TrajectoryParams) -> (f64, [f64; 4]) {
        let mut value = 0.0;
        let mut grad = [0.0; 4];
        for (row, &s) in self.values.outer_iter().zip(&self.dps) {
            let f = theta.eval(s);
            let mut resid = 0.0;
            let mut sq = 0.0;
            for (&v, &z) in row.iter().zip(&self.weights) {
                let e = v - f;
                resid += z * e;
                sq += z * e * e;
            }
            value += sq;
            let g = sigmoid_grad(s, theta).theta();
            for p in 0..4 {
                grad[p] -= 2.0 * resid * g[p];
            }
        }
        (value, grad)
    }

    fn linear_fit(&self, b: f64, c: f64) -> Option<(f64, f64)> {
        linear_fit_from_totals(&self.dps, self.weight_total, &self.row_totals, b, c)
    }
}

pub(crate) fn row_dps(data: &Dataset, stages: &[SubjectStage]) -> Vec<f64> {
    (0..data.n_rows())
        .map(|r| stages[data.subject_of_row(r)].dps(data.age(r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryFit {
    pub theta: TrajectoryParams,
    /// Maximized objective `-scale · loss + log p(θ)` at `theta`.
    pub objective: f64,
    pub init_objective: f64,
    /// False when no start improved on the initial value.
    pub progressed: bool,
}

/// Deterministic start schedule derived only from the current shape.
fn start_points(init: &TrajectoryParams, n: usize) -> Vec<(f64, f64)> {
    let b = if init.b != 0.0 { init.b } else { 1.0 };
    let w = 1.0 / b.abs();
    let mut out = vec![
        (2.0 * b, init.c),
        (0.5 * b, init.c),
        (b, init.c + 2.0 * w),
        (b, init.c - 2.0 * w),
        (4.0 * b, init.c),
        (0.25 * b, init.c),
        (b, init.c + 4.0 * w),
        (b, init.c - 4.0 * w),
    ];
    out.truncate(n.saturating_sub(1));
    out
}

/// Multi-start maximization of `-scale · loss(θ) + log p(θ)`. Never
/// returns a value worse than `init`.
pub fn fit_trajectory_with<L: TrajectoryLoss + ?Sized>(
    loss: &L,
    scale: f64,
    prior: &ThetaPrior,
    init: TrajectoryParams,
    starts: usize,
    opts: &BfgsOptions,
) -> TrajectoryFit {
    let neg_objective = |x: &[f64; 4]| {
        let t = TrajectoryParams::from_array(*x);
        let (v, g) = loss.value_grad(&t);
        let pg = prior.grad(&t);
        let f = scale * v - prior.log_density(&t);
        (f, std::array::from_fn(|p| scale * g[p] - pg[p]))
    };

    let init_value = neg_objective(&init.to_array()).0;
    let mut best = (init.to_array(), init_value);
    let mut candidates = vec![init];
    for (b, c) in start_points(&init, starts) {
        let (a, d) = loss.linear_fit(b, c).unwrap_or((init.a, init.d));
        candidates.push(TrajectoryParams::new(a, b, c, d));
    }
    for start in candidates {
        let m = bfgs(neg_objective, start.to_array(), opts);
        if m.f.is_finite() && m.f < best.1 && m.x.iter().all(|v| v.is_finite()) {
            best = (m.x, m.f);
        }
    }
    TrajectoryFit {
        theta: TrajectoryParams::from_array(best.0),
        objective: -best.1,
        init_objective: -init_value,
        progressed: best.1 < init_value,
    }
}

/// Slow-path update for cluster `k`.
#[allow(clippy::too_many_arguments)]
pub fn fit_trajectory(
    k: usize,
    data: &Dataset,
    posteriors: &Array2<f64>,
    stages: &[SubjectStage],
    sigma_k: f64,
    prior: &ThetaPrior,
    init: TrajectoryParams,
    starts: usize,
    opts: &BfgsOptions,
) -> TrajectoryFit {
    let loss = SlowTrajectoryLoss::new(data, posteriors.column(k), stages);
    fit_trajectory_with(&loss, 0.5 / (sigma_k * sigma_k), prior, init, starts, opts)
}

/// The slow trajectory objective `-Σ_l z_lk Σ_r e² / (2σ²) + log p(θ)`.
pub fn trajectory_objective_slow(
    k: usize,
    data: &Dataset,
    posteriors: &Array2<f64>,
    stages: &[SubjectStage],
    sigma_k: f64,
    prior: &ThetaPrior,
    theta: &TrajectoryParams,
) -> f64 {
    let loss = SlowTrajectoryLoss::new(data, posteriors.column(k), stages);
    -loss.value(theta) * 0.5 / (sigma_k * sigma_k) + prior.log_density(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Adjacency, Observation};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn dataset(truth: &TrajectoryParams, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Observation> = (0..12u64)
            .flat_map(|s| {
                let base = -6.0 + s as f64;
                (0..3u64).map(move |v| Observation {
                    subject: s,
                    visit: v,
                    age: base + 0.5 * v as f64,
                })
            })
            .collect();
        let values = Array2::from_shape_fn((rows.len(), 4), |(r, _)| {
            truth.eval(rows[r].age) + noise * n.sample(&mut rng)
        });
        Dataset::new(values, rows, Adjacency::grid(4, 1)).unwrap()
    }

    #[test]
    fn recovers_noise_free_trajectory() {
        let truth = TrajectoryParams::new(2.0, 0.8, 0.5, -1.0);
        let data = dataset(&truth, 0.0, 1);
        let z = Array2::ones((4, 1));
        let stages = vec![SubjectStage::IDENTITY; 12];
        let init = TrajectoryParams::new(1.0, 1.0, 0.0, 0.0);
        let fit = fit_trajectory(0, &data, &z, &stages, 0.1, &ThetaPrior::Uniform, init, 5, &BfgsOptions::default());
        assert!(fit.progressed);
        let rms = (data
            .rows()
            .iter()
            .map(|o| (fit.theta.eval(o.age) - truth.eval(o.age)).powi(2))
            .sum::<f64>()
            / data.n_rows() as f64)
            .sqrt();
        assert!(rms < 1e-4, "rms {rms}, theta {:?}", fit.theta);
    }

    #[test]
    fn empty_cluster_returns_init() {
        let data = dataset(&TrajectoryParams::new(1.0, 1.0, 0.0, 0.0), 0.1, 2);
        let z = Array2::zeros((4, 1));
        let init = TrajectoryParams::new(0.3, 0.7, 1.0, 0.2);
        let fit = fit_trajectory(
            0,
            &data,
            &z,
            &[SubjectStage::IDENTITY; 12],
            1.0,
            &ThetaPrior::Uniform,
            init,
            5,
            &BfgsOptions::default(),
        );
        assert_eq!(fit.theta, init);
        assert!(!fit.progressed);
    }

    #[test]
    fn prior_dominated_limit() {
        let data = dataset(&TrajectoryParams::new(1.0, 1.0, 0.0, 0.0), 0.1, 3);
        let z = Array2::from_elem((4, 1), 1e-12);
        let centre = TrajectoryParams::new(-1.0, 0.4, 2.0, 0.5);
        let prior = ThetaPrior::Gaussian {
            mean: centre,
            sd: [1e-3; 4],
        };
        let fit = fit_trajectory(
            0,
            &data,
            &z,
            &[SubjectStage::IDENTITY; 12],
            1.0,
            &prior,
            TrajectoryParams::new(1.0, 1.0, 0.0, 0.0),
            5,
            &BfgsOptions::default(),
        );
        for (a, b) in fit.theta.to_array().iter().zip(centre.to_array()) {
            assert!((a - b).abs() < 1e-3, "{:?}", fit.theta);
        }
    }

    #[test]
    fn never_worse_than_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let data = dataset(&TrajectoryParams::new(1.5, 0.5, 0.0, 0.0), 0.5, seed);
            let z = Array2::from_shape_fn((4, 1), |_| rng.random_range(0.1..1.0));
            let init = TrajectoryParams::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
            );
            let stages = vec![SubjectStage::IDENTITY; 12];
            let fit = fit_trajectory(0, &data, &z, &stages, 0.5, &ThetaPrior::Uniform, init, 5, &BfgsOptions::default());
            let before = trajectory_objective_slow(0, &data, &z, &stages, 0.5, &ThetaPrior::Uniform, &init);
            let after = trajectory_objective_slow(0, &data, &z, &stages, 0.5, &ThetaPrior::Uniform, &fit.theta);
            assert!(after >= before);
        }
    }

    #[test]
    fn slow_gradient_matches_finite_differences() {
        let data = dataset(&TrajectoryParams::new(1.5, 0.5, 0.0, 0.0), 0.3, 4);
        let z = ndarray::array![0.2, 0.9, 0.4, 0.7];
        let loss = SlowTrajectoryLoss::new(&data, z.view(), &[SubjectStage::IDENTITY; 12]);
        let t = TrajectoryParams::new(1.2, 0.7, 0.4, -0.3);
        let (_, g) = loss.value_grad(&t);
        for p in 0..4 {
            let h = 1e-6;
            let mut up = t.to_array();
            let mut dn = t.to_array();
            up[p] += h;
            dn[p] -= h;
            let fd = (loss.value(&TrajectoryParams::from_array(up))
                - loss.value(&TrajectoryParams::from_array(dn)))
                / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-5 * g[p].abs().max(1.0));
        }
    }
}
