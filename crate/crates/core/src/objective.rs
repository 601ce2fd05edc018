//! Penalized expected complete-data log-likelihood and DPS gauge fixing.

use ndarray::Array2;

use crate::dataset::{Adjacency, Dataset};
use crate::error::{DiveError, Result};
use crate::estep::compute_data_fit;
use crate::model::ModelState;
use crate::numeric::{canonical_sum, mean, std_dev};
use crate::priors::Priors;

/// Expected log clique potential under independent posteriors:
/// `Σ_l Σ_{m∈N(l)} Σ_k z_lk [λ z_mk - λ² (1 - z_mk)]`.
pub fn mrf_expectation(z: &Array2<f64>, adjacency: &Adjacency, lambda: f64) -> f64 {
    let k = z.ncols();
    let lambda_sq = lambda * lambda;
    let mut buf = Vec::with_capacity(k);
    let mut total = 0.0;
    for l in 0..z.nrows() {
        for &m in adjacency.neighbors(l) {
            buf.clear();
            buf.extend(
                (0..k).map(|c| z[[l, c]] * (lambda * z[[m, c]] - lambda_sq * (1.0 - z[[m, c]]))),
            );
            total += canonical_sum(&mut buf);
        }
    }
    total
}

/// `Σ_l Σ_k z_lk D_lk` + MRF expectation + log priors, posteriors held fixed.
pub fn penalized_objective(data: &Dataset, model: &ModelState, priors: &Priors) -> Result<f64> {
    let dfit = compute_data_fit(data, model)?;
    let k = model.k();
    let mut buf = Vec::with_capacity(k);
    let mut data_term = 0.0;
    for (zrow, drow) in model.posteriors.outer_iter().zip(dfit.d.outer_iter()) {
        buf.clear();
        buf.extend(zrow.iter().zip(drow.iter()).map(|(z, d)| z * d));
        data_term += canonical_sum(&mut buf);
    }
    let mrf = mrf_expectation(&model.posteriors, data.adjacency(), model.mrf.lambda);
    buf.clear();
    buf.extend(model.trajectories.iter().map(|t| priors.theta.log_density(t)));
    let theta_prior = canonical_sum(&mut buf);
    let stage_prior: f64 = model
        .stages
        .iter()
        .map(|s| priors.stage.log_density(s))
        .sum();
    let total = data_term + mrf + theta_prior + stage_prior;
    if !total.is_finite() {
        return Err(DiveError::FitDivergence(format!(
            "penalized objective is {total} (data {data_term}, mrf {mrf})"
        )));
    }
    Ok(total)
}

/// Baseline-visit DPS for every subject.
pub fn baseline_dps(data: &Dataset, model: &ModelState) -> Vec<f64> {
    (0..data.n_subjects())
        .map(|i| model.stages[i].dps(data.age(data.baseline_row(i))))
        .collect()
}

/// Affine re-gauge `s -> (s - m) / v` so baseline DPS has mean 0 and
/// standard deviation 1. The fitted curves are unchanged pointwise.
pub fn renormalize_dps(model: &ModelState, data: &Dataset) -> Result<ModelState> {
    if model.stages.len() != data.n_subjects() {
        return Err(DiveError::ParameterDomain(format!(
            "model has {} stages for {} subjects",
            model.stages.len(),
            data.n_subjects()
        )));
    }
    let base = baseline_dps(data, model);
    let m = mean(&base);
    let v = std_dev(&base);
    if !(v > 0.0) || !v.is_finite() {
        return Err(DiveError::DegenerateStaging);
    }
    let mut out = model.clone();
    for st in &mut out.stages {
        st.alpha /= v;
        st.beta = (st.beta - m) / v;
    }
    for t in &mut out.trajectories {
        t.c = (t.c - m) / v;
        t.b *= v;
    }
    Ok(out)
}
