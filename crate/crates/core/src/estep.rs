//! E-step: Gaussian data-fit terms and the MRF-smoothed posterior update.
//!
//! The posterior of vertex `l` conditions on its neighbours' posteriors
//! from the previous iteration:
//!
//! ```text
//! log z_lk ∝ D_lk + Σ_{m ∈ N(l)} log[ exp(-λ²) + z_prev_mk (exp(λ) - exp(-λ²)) ]
//! D_lk     = -|I|/2 · log(2π σ_k²) - Σ_r (V_rl - f(dps_r; θ_k))² / (2 σ_k²)
//! ```
//!
//! All rows are computed from the same `z_prev` snapshot (Jacobi update).

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::dataset::{Adjacency, Dataset};
use crate::error::{DiveError, Result};
use crate::model::ModelState;
use crate::numeric::canonical_sum;

/// Floor applied to the neighbour-term argument before the log.
pub const LOG_FLOOR: f64 = 1e-300;

const VERTEX_CHUNK: usize = 256;

/// `L × K` matrix of data-fit log-likelihoods `D_lk`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFitMatrix {
    pub d: Array2<f64>,
}

/// Trajectory values `f(dps_r; θ_k)` for every observation row and cluster.
pub fn trajectory_values(data: &Dataset, model: &ModelState) -> Array2<f64> {
    let k = model.k();
    let mut out = Array2::zeros((data.n_rows(), k));
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let stage = model.stages[data.subject_of_row(r)];
        let s = stage.dps(data.age(r));
        for (c, t) in model.trajectories.iter().enumerate() {
            row[c] = t.eval(s);
        }
    }
    out
}

/// Residual sums of squares `Σ_r (V_rl - F_rk)²` as an `L × K` matrix.
pub fn residual_sum_squares(values: &Array2<f64>, fvals: &Array2<f64>) -> Array2<f64> {
    let n_vertices = values.ncols();
    let k = fvals.ncols();
    let chunks: Vec<(usize, Vec<f64>)> = (0..n_vertices)
        .step_by(VERTEX_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + VERTEX_CHUNK).min(n_vertices);
            let width = end - start;
            let mut acc = vec![0.0; width * k];
            for (vrow, frow) in values.outer_iter().zip(fvals.outer_iter()) {
                for (j, &v) in vrow.slice(ndarray::s![start..end]).iter().enumerate() {
                    for (c, &f) in frow.iter().enumerate() {
                        let e = v - f;
                        acc[j * k + c] += e * e;
                    }
                }
            }
            (start, acc)
        })
        .collect();
    let mut out = Array2::zeros((n_vertices, k));
    for (start, acc) in chunks {
        for (j, chunk) in acc.chunks(k).enumerate() {
            for (c, &v) in chunk.iter().enumerate() {
                out[[start + j, c]] = v;
            }
        }
    }
    out
}

pub fn compute_data_fit(data: &Dataset, model: &ModelState) -> Result<DataFitMatrix> {
    if let Some((k, s)) = model
        .sigmas
        .iter()
        .enumerate()
        .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
    {
        return Err(DiveError::ParameterDomain(format!(
            "sigma_{k} = {s} must be positive"
        )));
    }
    let fvals = trajectory_values(data, model);
    let mut d = residual_sum_squares(data.values(), &fvals);
    let n_obs = data.n_rows() as f64;
    for (c, mut col) in d.axis_iter_mut(Axis(1)).enumerate() {
        let var = model.sigmas[c] * model.sigmas[c];
        let norm = -0.5 * n_obs * (2.0 * std::f64::consts::PI * var).ln();
        col.mapv_inplace(|ss| norm - ss / (2.0 * var));
    }
    Ok(DataFitMatrix { d })
}

/// Log MRF support `log[exp(-λ²) + z (exp(λ) - exp(-λ²))]` for one neighbour.
#[inline]
pub fn neighbor_log_support(z: f64, lambda: f64) -> f64 {
    let off = (-lambda * lambda).exp();
    let on = lambda.exp();
    (off + z * (on - off)).max(LOG_FLOOR).ln()
}

/// Unnormalized log posterior weights for vertex `l`.
pub fn log_weights_row(
    l: usize,
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
    lambda: f64,
) -> Vec<f64> {
    let k = dfit.d.ncols();
    let off = (-lambda * lambda).exp();
    let gap = lambda.exp() - off;
    (0..k)
        .map(|c| {
            let mut acc = dfit.d[[l, c]];
            for &m in adjacency.neighbors(l) {
                acc += (off + z_prev[[m, c]] * gap).max(LOG_FLOOR).ln();
            }
            acc
        })
        .collect()
}

pub fn update_posteriors(
    dfit: &DataFitMatrix,
    z_prev: &Array2<f64>,
    adjacency: &Adjacency,
    lambda: f64,
) -> Result<Array2<f64>> {
    let (n_vertices, k) = dfit.d.dim();
    if z_prev.dim() != (n_vertices, k) || adjacency.len() != n_vertices {
        return Err(DiveError::ParameterDomain(format!(
            "shape mismatch: D is {n_vertices}x{k}, z_prev is {:?}, mesh has {} vertices",
            z_prev.dim(),
            adjacency.len()
        )));
    }
    let rows: Vec<Result<Vec<f64>>> = (0..n_vertices)
        .into_par_iter()
        .map(|l| {
            let w = log_weights_row(l, dfit, z_prev, adjacency, lambda);
            if let Some(c) = w.iter().position(|v| !v.is_finite()) {
                return Err(DiveError::InferenceDivergence {
                    vertex: l,
                    cluster: c,
                });
            }
            normalize_log_weights(&w)
        })
        .collect();
    let mut out = Array2::zeros((n_vertices, k));
    for (l, row) in rows.into_iter().enumerate() {
        for (c, v) in row?.into_iter().enumerate() {
            out[[l, c]] = v;
        }
    }
    Ok(out)
}

/// Maps log weights onto the simplex via `z_k = 1 / Σ_m exp(x_m - x_k)`,
/// which never exponentiates a positive difference larger than needed and
/// cannot overflow to NaN.
pub fn normalize_log_weights(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DiveError::ParameterDomain(format!(
            "non-finite log weight in {x:?}"
        )));
    }
    let mut buf = Vec::with_capacity(x.len());
    Ok(x
        .iter()
        .map(|&xk| {
            buf.clear();
            buf.extend(x.iter().map(|&xm| (xm - xk).exp()));
            1.0 / canonical_sum(&mut buf)
        })
        .collect())
}
