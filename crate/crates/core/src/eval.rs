//! Cross-validated comparison of the full model against the ROI and
//! no-staging baselines.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::fast::{cluster_means_lenient, fit_stage_fast};
use crate::gem::{gem_fit, FitMode};
use crate::metrics::{pearson, spearman};
use crate::model::{ModelState, SubjectStage};
use crate::mstep::FitConfig;
use crate::priors::Priors;

/// Monotone map applied to the true DPS when simulating a covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Linear,
    Logistic,
    Cubic,
}

impl Link {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Link::Linear => s,
            Link::Logistic => 1.0 / (1.0 + (-s).exp()),
            Link::Cubic => s * s * s,
        }
    }
}

/// One value per dataset row, e.g. a clinical score at each visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    values: Vec<f64>,
}

impl Covariate {
    pub fn new(name: impl Into<String>, values: Vec<f64>, data: &Dataset) -> Result<Self> {
        let name = name.into();
        if values.len() != data.n_rows() {
            return Err(DiveError::InvalidDataset(format!(
                "covariate {name} has {} values for {} rows",
                values.len(),
                data.n_rows()
            )));
        }
        if let Some(r) = values.iter().position(|v| !v.is_finite()) {
            return Err(DiveError::InvalidDataset(format!(
                "covariate {name} is not finite at row {r}"
            )));
        }
        Ok(Self { name, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values for `data.subset(subjects)`, in the same row order.
    pub fn subset(&self, data: &Dataset, subjects: &[usize]) -> Covariate {
        let rows = subset_rows(data, subjects);
        Covariate {
            name: self.name.clone(),
            values: rows.iter().map(|&r| self.values[r]).collect(),
        }
    }

    pub fn baseline(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n_subjects())
            .map(|i| self.values[data.baseline_row(i)])
            .collect()
    }
}

fn subset_rows(data: &Dataset, subjects: &[usize]) -> Vec<usize> {
    let mut rows: Vec<usize> = subjects
        .iter()
        .flat_map(|&i| data.subject_rows(i).iter().copied())
        .collect();
    rows.sort_unstable();
    rows
}

/// `link(dps) + N(0, noise_sd²)` per row.
pub fn simulate_covariate(
    name: &str,
    data: &Dataset,
    true_dps: &[f64],
    link: Link,
    noise_sd: f64,
    seed: u64,
) -> Result<Covariate> {
    let noise = Normal::new(0.0, noise_sd)
        .map_err(|e| DiveError::Config(format!("covariate noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = true_dps
        .iter()
        .map(|&s| link.apply(s) + noise.sample(&mut rng))
        .collect();
    Covariate::new(name, values, data)
}

/// Linear, logistic and cubic covariates of the true DPS. Each link's noise
/// SD is `relative_noise` times the SD of the noiseless values; the DPS is
/// standardized first so the links act on a fixed scale.
pub fn simulate_covariates(
    data: &Dataset,
    true_dps: &[f64],
    relative_noise: f64,
    seed: u64,
) -> Result<Vec<Covariate>> {
    let sd = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let mean = true_dps.iter().sum::<f64>() / true_dps.len() as f64;
    let scale = sd(true_dps);
    if !(scale > 0.0) {
        return Err(DiveError::DegenerateStaging);
    }
    let z: Vec<f64> = true_dps.iter().map(|s| (s - mean) / scale).collect();
    [("linear", Link::Linear), ("logistic", Link::Logistic), ("cubic", Link::Cubic)]
        .iter()
        .enumerate()
        .map(|(n, &(name, link))| {
            let clean: Vec<f64> = z.iter().map(|&s| link.apply(s)).collect();
            let noise = relative_noise * sd(&clean);
            simulate_covariate(name, data, &z, link, noise, seed.wrapping_add(n as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subject-level k-fold partition.
pub fn kfold_split(n_subjects: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(DiveError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if n_subjects < folds {
        return Err(DiveError::Config(format!(
            "{n_subjects} subjects cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_subjects / folds;
    let extra = n_subjects % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut test = order[start..start + len].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        train.sort_unstable();
        out.push(Fold { train, test });
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitsUsed {
    All,
    FirstTwo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestStaging {
    /// Per test subject; `None` when excluded.
    pub stages: Vec<Option<SubjectStage>>,
    /// External ids of excluded subjects.
    pub excluded: Vec<u64>,
}

impl TestStaging {
    pub fn staged(&self) -> impl Iterator<Item = (usize, &SubjectStage)> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
    }
}

/// Fits `(α_i, β_i)` for every subject of `test` against the frozen model.
pub fn stage_test_subjects(
    model: &ModelState,
    mode: &FitMode,
    test: &Dataset,
    visits: VisitsUsed,
    priors: &Priors,
    config: &FitConfig,
) -> Result<TestStaging> {
    if test.n_vertices() != model.n_vertices() {
        return Err(DiveError::InvalidDataset(format!(
            "test data has {} vertices, model has {}",
            test.n_vertices(),
            model.n_vertices()
        )));
    }
    let n = test.n_subjects();
    let eligible = |i: usize| visits == VisitsUsed::All || test.subject_rows(i).len() >= 2;
    let excluded: Vec<u64> = (0..n)
        .filter(|&i| !eligible(i))
        .map(|i| test.subject_id(i))
        .collect();
    if !excluded.is_empty() {
        warn!("{} test subjects have fewer than two visits", excluded.len());
    }
    if matches!(mode, FitMode::NoStaging) {
        let stages = (0..n)
            .map(|i| eligible(i).then_some(SubjectStage::IDENTITY))
            .collect();
        return Ok(TestStaging { stages, excluded });
    }

    let means = cluster_means_lenient(test, &model.posteriors);
    let opts = config.bfgs();
    let trained = &model.stages;
    let alpha0 = (trained.iter().map(|s| s.alpha.ln()).sum::<f64>() / trained.len() as f64).exp();
    let mean_alpha = trained.iter().map(|s| s.alpha).sum::<f64>() / trained.len() as f64;
    let mean_beta = trained.iter().map(|s| s.beta).sum::<f64>() / trained.len() as f64;

    let stages = (0..n)
        .into_par_iter()
        .map(|i| {
            if !eligible(i) {
                return Ok(None);
            }
            let all = test.subject_rows(i);
            let rows = match visits {
                VisitsUsed::All => all,
                VisitsUsed::FirstTwo => &all[..2],
            };
            let t = rows.iter().map(|&r| test.age(r)).sum::<f64>() / rows.len() as f64;
            // Average training DPS at this subject's age.
            let init = SubjectStage {
                alpha: alpha0,
                beta: mean_beta + t * (mean_alpha - alpha0),
            };
            let fit = fit_stage_fast(
                test,
                rows,
                &means,
                &model.trajectories,
                &model.sigmas,
                &priors.stage,
                init,
                &opts,
            )?;
            Ok(Some(fit.stage))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestStaging { stages, excluded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Mean over vertices of the per-vertex RMSE.
    pub rmse: f64,
    pub vertex_rmse: Vec<f64>,
    /// Number of predicted rows.
    pub rows: usize,
}

/// Predicts visits after the second for each staged subject as
/// `Σ_k z_lk f(α_i t + β_i; θ_k)`.
pub fn predict_future(model: &ModelState, staging: &TestStaging, test: &Dataset) -> Result<Prediction> {
    let later: Vec<(usize, SubjectStage)> = staging
        .staged()
        .flat_map(|(i, s)| test.subject_rows(i).iter().skip(2).map(move |&r| (r, *s)))
        .collect();
    if later.is_empty() {
        return Err(DiveError::InvalidDataset(
            "no visits after the second to predict".into(),
        ));
    }
    let k = model.k();
    let sse: Vec<f64> = (0..test.n_vertices())
        .into_par_iter()
        .map(|l| {
            later
                .iter()
                .map(|&(r, stage)| {
                    let s = stage.dps(test.age(r));
                    let pred: f64 = (0..k)
                        .map(|c| model.posteriors[[l, c]] * model.trajectories[c].eval(s))
                        .sum();
                    let e = test.values()[[r, l]] - pred;
                    e * e
                })
                .sum()
        })
        .collect();
    let vertex_rmse: Vec<f64> = sse.iter().map(|s| (s / later.len() as f64).sqrt()).collect();
    let rmse = vertex_rmse.iter().sum::<f64>() / vertex_rmse.len() as f64;
    Ok(Prediction {
        rmse,
        vertex_rmse,
        rows: later.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

/// Correlation of baseline DPS with the baseline covariate over staged
/// subjects.
pub fn correlate_dps_covariate(
    test: &Dataset,
    staging: &TestStaging,
    covariate: &Covariate,
    method: CorrelationMethod,
) -> Result<f64> {
    let (dps, cov): (Vec<f64>, Vec<f64>) = staging
        .staged()
        .map(|(i, s)| {
            let r = test.baseline_row(i);
            (s.dps(test.age(r)), covariate.values()[r])
        })
        .unzip();
    match method {
        CorrelationMethod::Pearson => pearson(&dps, &cov),
        CorrelationMethod::Spearman => spearman(&dps, &cov),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonConfig {
    pub folds: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub priors: Priors,
    /// Per-vertex labels for the ROI baseline.
    pub atlas: Vec<usize>,
    pub method: CorrelationMethod,
}

impl ComparisonConfig {
    pub fn new(fit: FitConfig, atlas: Vec<usize>) -> Self {
        Self {
            folds: 10,
            seed: fit.seed,
            fit,
            priors: Priors::uniform(),
            atlas,
            method: CorrelationMethod::Pearson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero with fewer than two folds.
    pub sd: f64,
    pub per_fold: Vec<f64>,
}

impl Summary {
    pub fn from_values(per_fold: Vec<f64>) -> Self {
        let n = per_fold.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            per_fold.iter().sum::<f64>() / n as f64
        };
        let sd = if n < 2 {
            0.0
        } else {
            (per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd, per_fold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub model: String,
    /// One entry per covariate, in input order.
    pub correlations: Vec<Summary>,
    pub rmse: Summary,
    /// Parameter sub-steps that lowered the objective, summed over the
    /// training fits of the folds used.
    pub monotonicity_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub model: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub folds: usize,
    pub method: CorrelationMethod,
    pub covariates: Vec<String>,
    /// Folds that completed for every model; `per_fold` entries follow this order.
    pub folds_used: Vec<usize>,
    pub failures: Vec<FoldFailure>,
    pub models: Vec<ModelSummary>,
}

impl ComparisonReport {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == name)
    }
}

struct FoldResult {
    correlations: Vec<f64>,
    rmse: f64,
    violations: usize,
}

fn evaluate_model(
    train: &Dataset,
    test: &Dataset,
    test_covariates: &[Covariate],
    mode: &FitMode,
    config: &ComparisonConfig,
) -> Result<FoldResult> {
    let mut fit = config.fit.clone();
    if let FitMode::RoiFixed(labels) = mode {
        fit.k = labels.iter().max().map_or(1, |m| m + 1);
    }
    let (model, report) = gem_fit(train, &fit, &config.priors, mode)?;
    let all = stage_test_subjects(&model, mode, test, VisitsUsed::All, &config.priors, &fit)?;
    let correlations = test_covariates
        .iter()
        .map(|c| correlate_dps_covariate(test, &all, c, config.method))
        .collect::<Result<Vec<_>>>()?;
    let early = stage_test_subjects(&model, mode, test, VisitsUsed::FirstTwo, &config.priors, &fit)?;
    let rmse = predict_future(&model, &early, test)?.rmse;
    Ok(FoldResult {
        correlations,
        rmse,
        violations: report.monotonicity_violations.len(),
    })
}

/// Trains the full, ROI and no-staging models on each training split and
/// scores them on the held-out subjects.
pub fn run_comparison(
    data: &Dataset,
    covariates: &[Covariate],
    config: &ComparisonConfig,
) -> Result<ComparisonReport> {
    if config.atlas.len() != data.n_vertices() {
        return Err(DiveError::Config(format!(
            "atlas has {} labels for {} vertices",
            config.atlas.len(),
            data.n_vertices()
        )));
    }
    for c in covariates {
        if c.values().len() != data.n_rows() {
            return Err(DiveError::InvalidDataset(format!(
                "covariate {} is not aligned with the dataset",
                c.name
            )));
        }
    }
    let folds = kfold_split(data.n_subjects(), config.folds, config.seed)?;
    let modes = [
        FitMode::Full,
        FitMode::RoiFixed(config.atlas.clone()),
        FitMode::NoStaging,
    ];

    let results: Vec<Vec<Result<FoldResult>>> = folds
        .par_iter()
        .map(|fold| {
            let split = data.subset(&fold.train).and_then(|train| {
                let test = data.subset(&fold.test)?;
                Ok((train, test))
            });
            let (train, test) = match split {
                Ok(s) => s,
                Err(e) => {
                    let msg = e.to_string();
                    return modes
                        .iter()
                        .map(|_| Err(DiveError::InvalidDataset(msg.clone())))
                        .collect();
                }
            };
            let test_cov: Vec<Covariate> = covariates
                .iter()
                .map(|c| c.subset(data, &fold.test))
                .collect();
            modes
                .par_iter()
                .map(|mode| evaluate_model(&train, &test, &test_cov, mode, config))
                .collect()
        })
        .collect();

    let mut failures = Vec::new();
    let mut folds_used = Vec::new();
    for (f, per_model) in results.iter().enumerate() {
        let mut ok = true;
        for (mode, r) in modes.iter().zip(per_model) {
            if let Err(e) = r {
                warn!("fold {f} failed for {}: {e}", mode.name());
                failures.push(FoldFailure {
                    fold: f,
                    model: mode.name().to_string(),
                    error: e.to_string(),
                });
                ok = false;
            }
        }
        if ok {
            folds_used.push(f);
        }
    }

    let models = modes
        .iter()
        .enumerate()
        .map(|(m, mode)| {
            let used: Vec<&FoldResult> = folds_used
                .iter()
                .map(|&f| results[f][m].as_ref().expect("fold succeeded"))
                .collect();
            ModelSummary {
                model: mode.name().to_string(),
                correlations: (0..covariates.len())
                    .map(|c| Summary::from_values(used.iter().map(|r| r.correlations[c]).collect()))
                    .collect(),
                rmse: Summary::from_values(used.iter().map(|r| r.rmse).collect()),
                monotonicity_violations: used.iter().map(|r| r.violations).sum(),
            }
        })
        .collect();

    Ok(ComparisonReport {
        folds: config.folds,
        method: config.method,
        covariates: covariates.iter().map(|c| c.name.clone()).collect(),
        folds_used,
        failures,
        models,
    })
}
