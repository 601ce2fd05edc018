//! Starting point for the GEM loop: k-means on vertex series, softened
//! labels, identity-slope stages and percentile-based trajectory shapes.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::model::{ModelState, MrfPrior, SubjectStage};
use crate::numeric::quantile_sorted;
use crate::sigmoid::TrajectoryParams;

use super::{update_sigma, FitConfig};

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins. Points are the rows of `points`.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(DiveError::Config(format!("k = {k} must be in 1..={n}")));
    }
    let pts: Vec<Vec<f64>> = points.outer_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let result = kmeans_once(&pts, k, &mut rng);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_once(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = pts.len();
    let mut centres: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centres.push(pts[pick].clone());
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centres[centres.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let mut bl = 0;
            let mut bd = f64::INFINITY;
            for (c, centre) in centres.iter().enumerate() {
                let d = sq_dist(p, centre);
                if d < bd {
                    bd = d;
                    bl = c;
                }
            }
            if labels[i] != bl {
                labels[i] = bl;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = pts[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &lab) in pts.iter().zip(&labels) {
            counts[lab] += 1;
            for (s, v) in sums[lab].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the worst-fitted point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&pts[a], &centres[labels[a]])
                            .total_cmp(&sq_dist(&pts[b], &centres[labels[b]]))
                    })
                    .unwrap_or(0);
                centres[c] = pts[far].clone();
                labels[far] = c;
            } else {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = pts
        .iter()
        .zip(&labels)
        .map(|(p, &lab)| sq_dist(p, &centres[lab]))
        .sum();
    KMeansResult { labels, inertia }
}

fn soften(labels: &[usize], k: usize) -> Array2<f64> {
    if k == 1 {
        return Array2::ones((labels.len(), 1));
    }
    let other = 0.1 / (k - 1) as f64;
    Array2::from_shape_fn((labels.len(), k), |(l, c)| if labels[l] == c { 0.9 } else { other })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    }
}

/// Percentile-based shape for the vertices in `members`.
fn initial_trajectory(data: &Dataset, members: &[usize], dps: &[f64]) -> TrajectoryParams {
    let mut sorted_dps = dps.to_vec();
    sorted_dps.sort_by(f64::total_cmp);
    let centre = quantile_sorted(&sorted_dps, 0.5);
    if members.is_empty() {
        return TrajectoryParams::new(1.0, 1.0, centre, 0.0);
    }
    let values = data.values();
    let mut pooled: Vec<f64> = Vec::with_capacity(members.len() * data.n_rows());
    let mut row_means = Vec::with_capacity(data.n_rows());
    for row in values.outer_iter() {
        let mut acc = 0.0;
        for &l in members {
            pooled.push(row[l]);
            acc += row[l];
        }
        row_means.push(acc / members.len() as f64);
    }
    pooled.sort_by(f64::total_cmp);
    let p5 = quantile_sorted(&pooled, 0.05);
    let p95 = quantile_sorted(&pooled, 0.95);
    let ages: Vec<f64> = data.rows().iter().map(|o| o.age).collect();
    let sign = if pearson(&row_means, &ages) < 0.0 { -1.0 } else { 1.0 };
    let height = if p95 > p5 { p95 - p5 } else { 1.0 };
    // with b < 0 the curve runs from d + a down to d
    TrajectoryParams::new(height, sign, centre, p5)
}

/// Data-driven stages: the leading principal component of the standardized
/// observations serves as a severity score (sign fixed by age), and every
/// subject gets a shared slope and its own offset fitted to that score.
pub fn severity_stages(data: &Dataset) -> Vec<SubjectStage> {
    let values = data.values();
    let (rows, cols) = values.dim();
    let mut x = values.clone();
    for mut col in x.columns_mut() {
        let m = col.sum() / rows as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64).sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 });
    }
    let gram = x.dot(&x.t()) / cols as f64;
    let ages: Vec<f64> = data.rows().iter().map(|o| o.age).collect();
    let mean_age = ages.iter().sum::<f64>() / rows as f64;
    let mut score = ndarray::Array1::from_iter(ages.iter().map(|a| a - mean_age + 1e-3));
    for _ in 0..100 {
        let next = gram.dot(&score);
        let norm = next.dot(&next).sqrt();
        if !(norm > 0.0) {
            break;
        }
        score = next / norm;
    }
    let score: Vec<f64> = score.to_vec();
    let sign = if pearson(&score, &ages) < 0.0 { -1.0 } else { 1.0 };
    let m = score.iter().sum::<f64>() / rows as f64;
    let sd = (score.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64).sqrt();
    let score: Vec<f64> = score
        .iter()
        .map(|v| if sd > 0.0 { sign * (v - m) / sd } else { 0.0 })
        .collect();

    // pooled within-subject slope of score on age
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..data.n_subjects() {
        let r = data.subject_rows(i);
        let ta = r.iter().map(|&j| ages[j]).sum::<f64>() / r.len() as f64;
        let sa = r.iter().map(|&j| score[j]).sum::<f64>() / r.len() as f64;
        for &j in r {
            sxy += (ages[j] - ta) * (score[j] - sa);
            sxx += (ages[j] - ta) * (ages[j] - ta);
        }
    }
    let alpha = if sxx > 0.0 && sxy > 0.0 { sxy / sxx } else { 1.0 / sd.max(1.0) };
    (0..data.n_subjects())
        .map(|i| {
            let r = data.subject_rows(i);
            let ta = r.iter().map(|&j| ages[j]).sum::<f64>() / r.len() as f64;
            let sa = r.iter().map(|&j| score[j]).sum::<f64>() / r.len() as f64;
            SubjectStage {
                alpha,
                beta: sa - alpha * ta,
            }
        })
        .collect()
}

/// Initial state from seeded k-means on per-vertex observation vectors.
pub fn initialize(data: &Dataset, config: &FitConfig) -> Result<ModelState> {
    initialize_with(data, config, true)
}

/// As [`initialize`]; with `staging = false` every stage is the identity.
pub fn initialize_with(data: &Dataset, config: &FitConfig, staging: bool) -> Result<ModelState> {
    config.validate()?;
    if config.k > data.n_vertices() {
        return Err(DiveError::Config(format!(
            "k = {} exceeds the vertex count {}",
            config.k,
            data.n_vertices()
        )));
    }
    let points = data.values().t();
    let km = kmeans(points, config.k, config.kmeans_restarts, config.seed)?;
    build_initial_state(data, config.k, &km.labels, soften(&km.labels, config.k), staging)
}

/// k-means labels combined with [`severity_stages`].
pub fn initialize_severity(data: &Dataset, config: &FitConfig) -> Result<ModelState> {
    config.validate()?;
    if config.k > data.n_vertices() {
        return Err(DiveError::Config(format!(
            "k = {} exceeds the vertex count {}",
            config.k,
            data.n_vertices()
        )));
    }
    let km = kmeans(data.values().t(), config.k, config.kmeans_restarts, config.seed)?;
    let stages = severity_stages(data);
    build_state_with_stages(data, config.k, &km.labels, soften(&km.labels, config.k), stages)
}

/// Initial state from fixed labels (one-hot posteriors). With
/// `staging = false` every stage is the identity so DPS equals age.
pub fn initialize_with_labels(
    data: &Dataset,
    k: usize,
    labels: &[usize],
    staging: bool,
) -> Result<ModelState> {
    if labels.len() != data.n_vertices() {
        return Err(DiveError::Config(format!(
            "{} labels for {} vertices",
            labels.len(),
            data.n_vertices()
        )));
    }
    let z = crate::model::one_hot(labels, k)?;
    build_initial_state(data, k, labels, z, staging)
}

pub(crate) fn build_initial_state(
    data: &Dataset,
    k: usize,
    labels: &[usize],
    posteriors: Array2<f64>,
    staging: bool,
) -> Result<ModelState> {
    let stage = if staging {
        SubjectStage {
            alpha: 1.0,
            beta: -data.mean_age(),
        }
    } else {
        SubjectStage::IDENTITY
    };
    build_state_with_stages(data, k, labels, posteriors, vec![stage; data.n_subjects()])
}

pub(crate) fn build_state_with_stages(
    data: &Dataset,
    k: usize,
    labels: &[usize],
    posteriors: Array2<f64>,
    stages: Vec<SubjectStage>,
) -> Result<ModelState> {
    let dps: Vec<f64> = (0..data.n_rows())
        .map(|r| stages[data.subject_of_row(r)].dps(data.age(r)))
        .collect();
    let trajectories: Vec<TrajectoryParams> = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&l| labels[l] == c).collect();
            initial_trajectory(data, &members, &dps)
        })
        .collect();
    let sigmas = trajectories
        .iter()
        .enumerate()
        .map(|(c, t)| update_sigma(c, data, &posteriors, &stages, t))
        .collect();
    ModelState::new(trajectories, sigmas, stages, MrfPrior { lambda: 1.0 }, posteriors)
}
