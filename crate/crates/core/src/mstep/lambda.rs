//! MRF strength update.
//!
//! For a candidate `λ`, the posteriors are recomputed from the fixed data-fit
//! terms and previous posteriors (`ζ(λ)`, rows normalized), then scored by
//! `Σ_l Σ_k ζ_lk [D_lk + λ Σ_{m∈N(l)} ζ_mk - λ² Σ_{m∈N(l)} (1 - ζ_mk)]`.

use ndarray::Array2;

use crate::dataset::Adjacency;
use crate::error::{DiveError, Result};
use crate::estep::{log_weights_row, normalize_log_weights, update_posteriors, DataFitMatrix};
use crate::numeric::canonical_sum;
use crate::optim::golden_section_max;

use super::LambdaGrid;

/// Normalized `ζ_l·(λ)` for one vertex.
pub fn zeta(
    l: usize,
    lambda: f64,
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(DiveError::ParameterDomain(format!("lambda {lambda} < 0")));
    }
    let w = log_weights_row(l, dfit, z_prev, adjacency, lambda);
    if let Some(c) = w.iter().position(|v| !v.is_finite()) {
        return Err(DiveError::InferenceDivergence {
            vertex: l,
            cluster: c,
        });
    }
    normalize_log_weights(&w)
}

/// Normalized `ζ(λ)` for all vertices; identical to one E-step update.
pub fn zeta_matrix(
    lambda: f64,
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
) -> Result<Array2<f64>> {
    update_posteriors(dfit, z_prev, adjacency, lambda)
}

pub fn lambda_objective(
    lambda: f64,
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
) -> Result<f64> {
    let zeta = zeta_matrix(lambda, dfit, z_prev, adjacency)?;
    let k = zeta.ncols();
    let lambda_sq = lambda * lambda;
    let mut buf = Vec::with_capacity(k);
    let mut total = 0.0;
    for l in 0..zeta.nrows() {
        let neighbors = adjacency.neighbors(l);
        buf.clear();
        for c in 0..k {
            let same: f64 = neighbors.iter().map(|&m| zeta[[m, c]]).sum();
            let differ = neighbors.len() as f64 - same;
            buf.push(zeta[[l, c]] * (dfit.d[[l, c]] + lambda * same - lambda_sq * differ));
        }
        total += canonical_sum(&mut buf);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaFit {
    pub lambda: f64,
    pub objective: f64,
}

/// Grid search followed by golden-section refinement around the best grid
/// point. Ties keep the smallest `λ`; refinement is kept only if it
/// strictly improves on the grid optimum.
pub fn fit_lambda(
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
    grid: &LambdaGrid,
) -> Result<LambdaFit> {
    let values = grid.values();
    if values.is_empty() {
        return Err(DiveError::Config("empty lambda grid".into()));
    }
    let scores: Vec<(f64, Option<f64>)> = values
        .iter()
        .map(|&lam| {
            let v = lambda_objective(lam, dfit, z_prev, adjacency).ok().filter(|v| v.is_finite());
            (lam, v)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &(_, v)) in scores.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let Some((bi, bv)) = best else {
        return Err(DiveError::FitDivergence(
            "lambda objective is non-finite on the whole grid".into(),
        ));
    };
    let mut out = LambdaFit {
        lambda: values[bi],
        objective: bv,
    };
    if grid.refine && values.len() > 1 {
        let lo = values[bi.saturating_sub(1)];
        let hi = values[(bi + 1).min(values.len() - 1)];
        let (x, fx) = golden_section_max(
            |lam| {
                lambda_objective(lam, dfit, z_prev, adjacency)
                    .ok()
                    .filter(|v| v.is_finite())
                    .unwrap_or(f64::NEG_INFINITY)
            },
            lo,
            hi,
            1e-6 * (hi - lo).max(1e-12),
        );
        if fx > out.objective {
            out = LambdaFit {
                lambda: x,
                objective: fx,
            };
        }
    }
    Ok(out)
}
