#![allow(dead_code)]

use dive::dataset::{Adjacency, Dataset, Observation};
use dive::model::{ModelState, MrfPrior, SubjectStage};
use dive::sigmoid::TrajectoryParams;
use dive::synthetic::{ScenarioConfig, Topology};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random data on a `w × h` grid with a random model (not fitted).
pub fn random_instance(seed: u64, w: usize, h: usize, k: usize, subjects: usize) -> (Dataset, ModelState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vertices = w * h;
    let mut rows = Vec::new();
    for s in 0..subjects as u64 {
        let start = 70.0 + rng.random_range(-3.0..3.0);
        let visits = rng.random_range(1..=4u64);
        for v in 0..visits {
            rows.push(Observation {
                subject: s,
                visit: v,
                age: start + v as f64 * rng.random_range(0.5..1.5),
            });
        }
    }
    let trajectories: Vec<TrajectoryParams> = (0..k)
        .map(|_| TrajectoryParams {
            a: rng.random_range(0.5..2.0),
            b: rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            c: rng.random_range(-1.5..1.5),
            d: rng.random_range(-0.5..0.5),
        })
        .collect();
    let sigmas: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.5)).collect();
    let stages: Vec<SubjectStage> = (0..subjects)
        .map(|_| {
            let alpha = rng.random_range(0.5..2.0);
            SubjectStage {
                alpha,
                beta: -alpha * 70.0 + rng.random_range(-1.5..1.5),
            }
        })
        .collect();
    let values = Array2::from_shape_fn((rows.len(), n_vertices), |(r, l)| {
        let s = stages[rows[r].subject as usize].dps(rows[r].age);
        trajectories[l % k].eval(s) + rng.random_range(-0.5..0.5)
    });
    let mut z = Array2::from_shape_fn((n_vertices, k), |_| rng.random_range(0.01..1.0));
    for mut row in z.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let data = Dataset::new(values, rows, Adjacency::grid(w, h)).unwrap();
    let model = ModelState::new(
        trajectories,
        sigmas,
        stages,
        MrfPrior {
            lambda: rng.random_range(0.0..2.0),
        },
        z,
    )
    .unwrap();
    (data, model)
}

/// Small generated scenario for end-to-end fits.
pub fn small_scenario(seed: u64, noise: f64) -> ScenarioConfig {
    ScenarioConfig {
        vertices: 100,
        subjects: 20,
        noise,
        topology: Topology::Grid { width: 10 },
        ..ScenarioConfig::default()
    }
    .with_seed(seed)
}

pub fn bits(m: &ModelState) -> Vec<u64> {
    let mut out: Vec<u64> = m
        .trajectories
        .iter()
        .flat_map(|t| [t.a, t.b, t.c, t.d])
        .chain(m.sigmas.iter().copied())
        .chain(m.stages.iter().flat_map(|s| [s.alpha, s.beta]))
        .chain(m.posteriors.iter().copied())
        .map(f64::to_bits)
        .collect();
    out.push(m.mrf.lambda.to_bits());
    out
}

pub fn row_softmax(d: &Array2<f64>) -> Array2<f64> {
    let mut out = d.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}
