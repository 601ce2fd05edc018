//! Synthetic mesh datasets with known ground truth.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, Dataset, Observation};
use crate::error::{DiveError, Result};
use crate::model::SubjectStage;
use crate::sigmoid::TrajectoryParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Rectangular 4-neighbour lattice; `vertices` must be a multiple of `width`.
    Grid { width: usize },
    RandomRegular { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coherence {
    /// Contiguous regions grown from random seeds.
    Patches,
    /// Gibbs sample of a `K`-state Potts model.
    Potts { coupling: f64, sweeps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub k: usize,
    pub vertices: usize,
    pub subjects: usize,
    pub visits: usize,
    /// Years between consecutive visits.
    pub visit_spacing: f64,
    pub baseline_age_mean: f64,
    pub baseline_age_sd: f64,
    pub topology: Topology,
    pub coherence: Coherence,
    /// Distance between neighbouring sigmoid centres on the DPS axis.
    pub separation: f64,
    /// Trajectory amplitude `a`.
    pub height: f64,
    /// Trajectory slope `b`.
    pub slope: f64,
    /// Observation noise standard deviation.
    pub noise: f64,
    /// Standard deviation of `log α`.
    pub log_alpha_sd: f64,
    /// Standard deviation of each subject's DPS offset at the reference age.
    pub offset_sd: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            k: 3,
            vertices: 500,
            subjects: 50,
            visits: 4,
            visit_spacing: 1.0,
            baseline_age_mean: 70.0,
            baseline_age_sd: 2.0,
            topology: Topology::Grid { width: 25 },
            coherence: Coherence::Patches,
            separation: 5.0,
            height: 1.0,
            slope: 0.6,
            noise: 0.1,
            log_alpha_sd: 0.2,
            offset_sd: 3.0,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 3] = ["easy", "medium", "hard"];

impl ScenarioConfig {
    /// `easy`, `medium` and `hard` differ in noise (10%, 25% and 50% of
    /// the trajectory height); `hard` also draws labels from a Potts model.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "easy" => Self {
                noise: 0.1 * base.height,
                ..base
            },
            "medium" => Self {
                noise: 0.25 * base.height,
                ..base
            },
            "hard" => Self {
                noise: 0.5 * base.height,
                coherence: Coherence::Potts {
                    coupling: 1.5,
                    sweeps: 30,
                },
                ..base
            },
            other => {
                return Err(DiveError::Config(format!(
                    "unknown preset '{other}' (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.vertices < 2 || self.subjects == 0 || self.visits == 0 {
            return Err(DiveError::Config(
                "k, subjects and visits must be >= 1 and vertices >= 2".into(),
            ));
        }
        if self.k > self.vertices {
            return Err(DiveError::Config(format!(
                "k = {} exceeds the vertex count {}",
                self.k, self.vertices
            )));
        }
        let nonneg = [
            self.noise,
            self.baseline_age_sd,
            self.log_alpha_sd,
            self.offset_sd,
            self.visit_spacing,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(DiveError::Config(
                "noise, spreads and visit spacing must be finite and >= 0".into(),
            ));
        }
        if ![self.separation, self.height, self.slope, self.baseline_age_mean]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(DiveError::Config("trajectory settings must be finite".into()));
        }
        Ok(())
    }

    /// The generating trajectories: equal shapes with centres spaced by
    /// `separation` around zero.
    pub fn trajectories(&self) -> Vec<TrajectoryParams> {
        let mid = (self.k as f64 - 1.0) / 2.0;
        (0..self.k)
            .map(|c| TrajectoryParams::new(self.height, self.slope, (c as f64 - mid) * self.separation, 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    pub trajectories: Vec<TrajectoryParams>,
    pub stages: Vec<SubjectStage>,
    pub noise: f64,
}

impl GroundTruth {
    /// True DPS of every observation row.
    pub fn row_dps(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n_rows())
            .map(|r| self.stages[data.subject_of_row(r)].dps(data.age(r)))
            .collect()
    }
}

// independent RNG streams for each generation stage
const STREAM_MESH: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_STAGES: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_mesh(config: &ScenarioConfig) -> Result<Adjacency> {
    let l = config.vertices;
    if l < 2 {
        return Err(DiveError::Config("a mesh needs at least 2 vertices".into()));
    }
    match config.topology {
        Topology::Grid { width } => {
            if width == 0 || l % width != 0 {
                return Err(DiveError::Config(format!(
                    "{l} vertices do not fill a grid of width {width}"
                )));
            }
            Ok(Adjacency::grid(width, l / width))
        }
        Topology::RandomRegular { degree } => {
            random_regular(l, degree, &mut stream(config.seed, STREAM_MESH))
        }
    }
}

/// Pairing-model random regular graph, resampled until simple and connected.
fn random_regular(n: usize, degree: usize, rng: &mut ChaCha8Rng) -> Result<Adjacency> {
    if degree == 0 || degree >= n || (n * degree) % 2 != 0 {
        return Err(DiveError::Config(format!(
            "no {degree}-regular graph on {n} vertices"
        )));
    }
    const ATTEMPTS: usize = 200;
    for _ in 0..ATTEMPTS {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
        stubs.shuffle(rng);
        let mut neighbors = vec![Vec::with_capacity(degree); n];
        let mut ok = true;
        for pair in stubs.chunks(2) {
            let (a, b) = (pair[0], pair[1]);
            if a == b || neighbors[a].contains(&b) {
                ok = false;
                break;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        if !ok {
            continue;
        }
        let adj = Adjacency::from_neighbors(neighbors)?;
        if adj.is_connected() {
            return Ok(adj);
        }
    }
    Err(DiveError::Config(format!(
        "failed to sample a connected {degree}-regular graph on {n} vertices"
    )))
}

/// Grows `k` contiguous regions breadth-first from distinct random seeds.
pub fn patch_labels(adjacency: &Adjacency, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = adjacency.len();
    let mut labels = vec![usize::MAX; n];
    let seeds = rand::seq::index::sample(rng, n, k);
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); k];
    for (c, v) in seeds.iter().enumerate() {
        labels[v] = c;
        queues[c].push_back(v);
    }
    // one vertex per region per round keeps region sizes comparable
    while queues.iter().any(|q| !q.is_empty()) {
        for c in 0..k {
            while let Some(v) = queues[c].pop_front() {
                let mut grew = false;
                for &m in adjacency.neighbors(v) {
                    if labels[m] == usize::MAX {
                        labels[m] = c;
                        queues[c].push_back(m);
                        grew = true;
                    }
                }
                if grew {
                    break;
                }
            }
        }
    }
    // vertices unreachable from every seed join region 0
    for lab in &mut labels {
        if *lab == usize::MAX {
            *lab = 0;
        }
    }
    labels
}

/// Heat-bath Gibbs sweeps of a `k`-state Potts model from a random start.
pub fn potts_labels(
    adjacency: &Adjacency,
    k: usize,
    coupling: f64,
    sweeps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = adjacency.len();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut weights = vec![0.0; k];
    for _ in 0..sweeps {
        for v in 0..n {
            weights.fill(0.0);
            for &m in adjacency.neighbors(v) {
                weights[labels[m]] += coupling;
            }
            let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for w in &mut weights {
                *w = (*w - top).exp();
                total += *w;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = k - 1;
            for (c, &w) in weights.iter().enumerate() {
                if u < w {
                    pick = c;
                    break;
                }
                u -= w;
            }
            labels[v] = pick;
        }
    }
    labels
}

fn sample_labels(config: &ScenarioConfig, adjacency: &Adjacency) -> Result<Vec<usize>> {
    let mut rng = stream(config.seed, STREAM_LABELS);
    const ATTEMPTS: usize = 50;
    for _ in 0..ATTEMPTS {
        let labels = match config.coherence {
            Coherence::Patches => patch_labels(adjacency, config.k, &mut rng),
            Coherence::Potts { coupling, sweeps } => {
                potts_labels(adjacency, config.k, coupling, sweeps, &mut rng)
            }
        };
        let mut seen = vec![false; config.k];
        for &l in &labels {
            seen[l] = true;
        }
        if seen.iter().all(|s| *s) {
            return Ok(labels);
        }
    }
    Err(DiveError::Config(
        "label sampler keeps producing empty clusters".into(),
    ))
}

/// Draws a dataset from the model: `V = f(α (t - t_ref) + δ; θ_label) + ε`.
pub fn generate_dataset(config: &ScenarioConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let adjacency = generate_mesh(config)?;
    let labels = sample_labels(config, &adjacency)?;
    let trajectories = config.trajectories();

    let mut rng = stream(config.seed, STREAM_STAGES);
    let alpha_dist = LogNormal::new(0.0, config.log_alpha_sd).map_err(|e| DiveError::Config(e.to_string()))?;
    let offset_dist = Normal::new(0.0, config.offset_sd).map_err(|e| DiveError::Config(e.to_string()))?;
    let age_dist = Normal::new(config.baseline_age_mean, config.baseline_age_sd)
        .map_err(|e| DiveError::Config(e.to_string()))?;
    let t_ref = config.baseline_age_mean;
    let mut stages = Vec::with_capacity(config.subjects);
    let mut rows = Vec::with_capacity(config.subjects * config.visits);
    for s in 0..config.subjects {
        let alpha = alpha_dist.sample(&mut rng);
        let offset = offset_dist.sample(&mut rng);
        let baseline = age_dist.sample(&mut rng);
        stages.push(SubjectStage::new(alpha, offset - alpha * t_ref)?);
        for v in 0..config.visits {
            rows.push(Observation {
                subject: s as u64,
                visit: v as u64,
                age: baseline + v as f64 * config.visit_spacing,
            });
        }
    }

    let mut rng = stream(config.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Array2::zeros((rows.len(), config.vertices));
    for (r, obs) in rows.iter().enumerate() {
        let dps = stages[obs.subject as usize].dps(obs.age);
        let curve: Vec<f64> = trajectories.iter().map(|t| t.eval(dps)).collect();
        for l in 0..config.vertices {
            let eps = if config.noise > 0.0 {
                config.noise * noise.sample(&mut rng)
            } else {
                0.0
            };
            values[[r, l]] = curve[labels[l]] + eps;
        }
    }
    let data = Dataset::new(values, rows, adjacency)?;
    Ok((
        data,
        GroundTruth {
            labels,
            trajectories,
            stages,
            noise: config.noise,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_mesh_shapes() {
        let cfg = ScenarioConfig {
            vertices: 4,
            topology: Topology::Grid { width: 2 },
            ..ScenarioConfig::default()
        };
        let adj = generate_mesh(&cfg).unwrap();
        assert_eq!((adj.len(), adj.edge_count()), (4, 4));
        let cfg = ScenarioConfig {
            vertices: 30,
            topology: Topology::Grid { width: 6 },
            ..ScenarioConfig::default()
        };
        let adj = generate_mesh(&cfg).unwrap();
        // interior vertex (row 1, col 1)
        assert_eq!(adj.degree(7), 4);
        assert!(generate_mesh(&ScenarioConfig {
            vertices: 31,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn random_regular_is_seeded_and_regular() {
        let cfg = ScenarioConfig {
            vertices: 40,
            topology: Topology::RandomRegular { degree: 3 },
            seed: 5,
            ..ScenarioConfig::default()
        };
        let a = generate_mesh(&cfg).unwrap();
        let b = generate_mesh(&cfg).unwrap();
        assert_eq!(a, b);
        assert!((0..40).all(|v| a.degree(v) == 3));
        assert!(a.is_connected());
        assert!(generate_mesh(&ScenarioConfig {
            topology: Topology::RandomRegular { degree: 40 },
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn patches_are_contiguous() {
        let adj = Adjacency::grid(12, 10);
        let labels = patch_labels(&adj, 4, &mut ChaCha8Rng::seed_from_u64(3));
        for c in 0..4 {
            let members: Vec<usize> = (0..120).filter(|&v| labels[v] == c).collect();
            assert!(!members.is_empty());
            // BFS within the region reaches every member
            let mut seen = vec![false; 120];
            let mut q = VecDeque::from([members[0]]);
            seen[members[0]] = true;
            let mut count = 0;
            while let Some(v) = q.pop_front() {
                count += 1;
                for &m in adj.neighbors(v) {
                    if labels[m] == c && !seen[m] {
                        seen[m] = true;
                        q.push_back(m);
                    }
                }
            }
            assert_eq!(count, members.len());
        }
    }

    #[test]
    fn potts_sample_is_spatially_coherent() {
        let adj = Adjacency::grid(20, 20);
        let labels = potts_labels(&adj, 3, 1.5, 30, &mut ChaCha8Rng::seed_from_u64(1));
        let agree = adj.edges().iter().filter(|(a, b)| labels[*a] == labels[*b]).count();
        // independent labels would agree on about a third of the edges
        assert!(agree as f64 / adj.edge_count() as f64 > 0.6);
    }

    #[test]
    fn zero_noise_values_lie_on_trajectories() {
        let cfg = ScenarioConfig {
            noise: 0.0,
            vertices: 50,
            topology: Topology::Grid { width: 10 },
            subjects: 6,
            ..ScenarioConfig::default()
        };
        let (data, truth) = generate_dataset(&cfg).unwrap();
        let dps = truth.row_dps(&data);
        for r in 0..data.n_rows() {
            for l in 0..50 {
                assert_eq!(data.values()[[r, l]], truth.trajectories[truth.labels[l]].eval(dps[r]));
            }
        }
    }

    #[test]
    fn identity_stages_make_dps_equal_age() {
        let cfg = ScenarioConfig {
            log_alpha_sd: 0.0,
            offset_sd: 0.0,
            baseline_age_mean: 0.0,
            vertices: 20,
            topology: Topology::Grid { width: 5 },
            ..ScenarioConfig::default()
        };
        let (data, truth) = generate_dataset(&cfg).unwrap();
        assert!(truth.stages.iter().all(|s| *s == SubjectStage::IDENTITY));
        let dps = truth.row_dps(&data);
        for (r, d) in dps.iter().enumerate() {
            assert_eq!(*d, data.age(r));
        }
    }

    #[test]
    fn value_variance_is_signal_plus_noise() {
        let cfg = ScenarioConfig {
            noise: 0.4,
            subjects: 200,
            seed: 11,
            ..ScenarioConfig::default()
        };
        let (data, truth) = generate_dataset(&cfg).unwrap();
        let dps = truth.row_dps(&data);
        let signal: Vec<f64> = (0..data.n_rows())
            .flat_map(|r| {
                let t = &truth;
                let s = dps[r];
                (0..data.n_vertices()).map(move |l| t.trajectories[t.labels[l]].eval(s))
            })
            .collect();
        let var = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
        };
        let observed: Vec<f64> = data.values().iter().copied().collect();
        let expected = var(&signal) + 0.16;
        assert!((var(&observed) - expected).abs() < 0.1 * expected);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::preset("hard").unwrap().with_seed(9);
        let (a, ta) = generate_dataset(&cfg).unwrap();
        let (b, tb) = generate_dataset(&cfg).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(ta, tb);
        let (c, _) = generate_dataset(&cfg.clone().with_seed(10)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn presets_scale_noise() {
        let n: Vec<f64> = PRESETS
            .iter()
            .map(|p| ScenarioConfig::preset(p).unwrap().noise)
            .collect();
        assert_eq!(n, vec![0.1, 0.25, 0.5]);
        assert!(ScenarioConfig::preset("extreme").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::preset("hard").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ScenarioConfig = toml::from_str("noise = 0.3\n[topology]\nkind = \"random_regular\"\ndegree = 4\n").unwrap();
        assert_eq!(partial.topology, Topology::RandomRegular { degree: 4 });
        assert_eq!(partial.k, 3);
    }
}
