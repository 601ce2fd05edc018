//! Recovery metrics against synthetic ground truth.

use ndarray::Array2;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::model::{ModelState, SubjectStage};
use crate::sigmoid::TrajectoryParams;

/// Largest `K` accepted by [`match_labels`].
pub const MAX_MATCH_K: usize = 20;

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method with potentials, `O(n³)`). Returns `assignment[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Permutation `perm` with `perm[true_k] = estimated cluster` maximizing the
/// total posterior mass the estimate puts on each true cluster.
pub fn match_labels(posteriors: &Array2<f64>, truth: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > MAX_MATCH_K {
        return Err(DiveError::Config(format!("label matching needs 1 <= K <= {MAX_MATCH_K}")));
    }
    if posteriors.ncols() != k || posteriors.nrows() != truth.len() {
        return Err(DiveError::Config(format!(
            "posteriors {:?} do not match {} labels and K = {k}",
            posteriors.dim(),
            truth.len()
        )));
    }
    let mut mass = Array2::<f64>::zeros((k, k));
    for (l, &t) in truth.iter().enumerate() {
        if t >= k {
            return Err(DiveError::Config(format!("true label {t} >= K = {k}")));
        }
        for e in 0..k {
            mass[[t, e]] += posteriors[[l, e]];
        }
    }
    Ok(hungarian(&mass.mapv(|m| -m)))
}

/// Fraction of vertices whose most probable estimated cluster is the one
/// matched to their true cluster.
pub fn label_agreement(model: &ModelState, truth: &[usize], perm: &[usize]) -> f64 {
    let est = model.hard_labels();
    let hits = truth.iter().zip(&est).filter(|(t, e)| perm[**t] == **e).count();
    hits as f64 / truth.len() as f64
}

/// Least-squares `y ≈ scale · x + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.shift
    }

    pub fn fit(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Self {
            scale,
            shift: my - scale * mx,
        }
    }
}

/// Baseline DPS of every subject under `stages`.
pub fn baseline_dps_of(data: &Dataset, stages: &[SubjectStage]) -> Vec<f64> {
    (0..data.n_subjects())
        .map(|i| stages[i].dps(data.age(data.baseline_row(i))))
        .collect()
}

/// Alignment of estimated baseline DPS onto the true ones.
pub fn dps_alignment(data: &Dataset, est: &[SubjectStage], truth: &[SubjectStage]) -> AffineMap {
    AffineMap::fit(&baseline_dps_of(data, est), &baseline_dps_of(data, truth))
}

/// SSD between aligned estimated and true DPS at each subject's baseline.
pub fn dps_error(data: &Dataset, est: &[SubjectStage], truth: &[SubjectStage]) -> f64 {
    let e = baseline_dps_of(data, est);
    let t = baseline_dps_of(data, truth);
    let map = AffineMap::fit(&e, &t);
    e.iter().zip(&t).map(|(a, b)| (map.apply(*a) - b).powi(2)).sum()
}

/// `Σ_k (aligned c_est[perm[k]] - c_true[k])²`.
pub fn center_error(
    est: &[TrajectoryParams],
    truth: &[TrajectoryParams],
    perm: &[usize],
    alignment: &AffineMap,
) -> f64 {
    truth
        .iter()
        .enumerate()
        .map(|(k, t)| (alignment.apply(est[perm[k]].c) - t.c).powi(2))
        .sum()
}

/// Per-cluster squared centre error after alignment, in true-cluster order.
pub fn center_errors(
    est: &[TrajectoryParams],
    truth: &[TrajectoryParams],
    perm: &[usize],
    alignment: &AffineMap,
) -> Vec<f64> {
    truth
        .iter()
        .enumerate()
        .map(|(k, t)| (alignment.apply(est[perm[k]].c) - t.c).powi(2))
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(DiveError::UndefinedCorrelation(format!(
            "need at least 3 paired values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(DiveError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks (ties share their mean rank).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Adjacency, Observation};
    use proptest::prelude::*;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn matched_mass(z: &Array2<f64>, truth: &[usize], perm: &[usize]) -> f64 {
        truth.iter().enumerate().map(|(l, &t)| z[[l, perm[t]]]).sum()
    }

    #[test]
    fn aligned_one_hot_gives_identity() {
        let truth = [0, 1, 2, 2, 1];
        let z = crate::model::one_hot(&truth, 3).unwrap();
        assert_eq!(match_labels(&z, &truth, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn swapped_labels_give_swap() {
        let truth = [0, 0, 1, 1];
        let z = crate::model::one_hot(&[1, 1, 0, 0], 2).unwrap();
        assert_eq!(match_labels(&z, &truth, 2).unwrap(), vec![1, 0]);
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive_search(
            k in 1usize..=5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut z = Array2::from_shape_fn((n, k), |_| rng.random_range(0.0..1.0));
            for mut row in z.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            let perm = match_labels(&z, &truth, k).unwrap();
            let best = permutations(k)
                .iter()
                .map(|p| matched_mass(&z, &truth, p))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((matched_mass(&z, &truth, &perm) - best).abs() < 1e-12);
        }
    }

    fn three_subjects() -> Dataset {
        let rows = vec![
            Observation { subject: 0, visit: 0, age: 60.0 },
            Observation { subject: 1, visit: 0, age: 70.0 },
            Observation { subject: 2, visit: 0, age: 80.0 },
            Observation { subject: 2, visit: 1, age: 81.0 },
        ];
        Dataset::new(Array2::zeros((4, 1)), rows, Adjacency::grid(1, 1)).unwrap()
    }

    #[test]
    fn dps_error_cases() {
        let data = three_subjects();
        let truth = vec![
            SubjectStage::new(1.0, -70.0).unwrap(),
            SubjectStage::new(1.0, -72.0).unwrap(),
            SubjectStage::new(1.0, -69.0).unwrap(),
        ];
        assert_eq!(dps_error(&data, &truth, &truth), 0.0);
        let affine: Vec<SubjectStage> = truth
            .iter()
            .map(|s| SubjectStage::new(0.5 * s.alpha, 0.5 * s.beta + 3.0).unwrap())
            .collect();
        assert!(dps_error(&data, &affine, &truth) < 1e-20);
        // true baseline DPS (-10, -2, 11) against estimates (0, 1, 0): the
        // fit is the group mean per distinct estimate, so the SSD is
        // (-10 - 0.5)² + (11 - 0.5)² = 220.5
        let est = vec![
            SubjectStage::new(1.0, -60.0).unwrap(),
            SubjectStage::new(1.0, -69.0).unwrap(),
            SubjectStage::new(1.0, -80.0).unwrap(),
        ];
        assert!((dps_error(&data, &est, &truth) - 220.5).abs() < 1e-9);
    }

    #[test]
    fn center_error_cases() {
        let t = vec![
            TrajectoryParams::new(1.0, 1.0, -2.0, 0.0),
            TrajectoryParams::new(1.0, 1.0, 0.0, 0.0),
            TrajectoryParams::new(1.0, 1.0, 3.0, 0.0),
        ];
        let id = AffineMap { scale: 1.0, shift: 0.0 };
        assert_eq!(center_error(&t, &t, &[0, 1, 2], &id), 0.0);
        let mut off = t.clone();
        off[1].c = 2.0;
        assert_eq!(center_error(&off, &t, &[0, 1, 2], &id), 4.0);
        // permuted and affinely rescaled estimate
        let est: Vec<TrajectoryParams> = [2, 0, 1]
            .iter()
            .map(|&k| TrajectoryParams { c: (t[k].c - 1.0) / 2.0, ..t[k] })
            .collect();
        let map = AffineMap { scale: 2.0, shift: 1.0 };
        assert!(center_error(&est, &t, &[1, 2, 0], &map) < 1e-24);
    }

    #[test]
    fn correlations() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert_eq!(spearman(&x, &cubed).unwrap(), 1.0);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(DiveError::UndefinedCorrelation(_))));
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
