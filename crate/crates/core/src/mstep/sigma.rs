use ndarray::Array2;

use crate::dataset::Dataset;
use crate::model::SubjectStage;
use crate::sigmoid::TrajectoryParams;

use super::trajectory::row_dps;

/// Lower bound on any noise level.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Closed-form noise update for cluster `k`:
/// `σ_k² = Σ_l z_lk Σ_r (V_rl - f(dps_r; θ_k))² / (|I| Σ_l z_lk)`,
/// floored at [`SIGMA_FLOOR`]. A cluster with no mass gets the floor.
pub fn update_sigma(
    k: usize,
    data: &Dataset,
    posteriors: &Array2<f64>,
    stages: &[SubjectStage],
    theta_k: &TrajectoryParams,
) -> f64 {
    let weights = posteriors.column(k);
    let mass: f64 = weights.sum();
    if !(mass > 0.0) {
        return SIGMA_FLOOR;
    }
    let dps = row_dps(data, stages);
    let mut total = 0.0;
    for (row, &s) in data.values().outer_iter().zip(&dps) {
        let f = theta_k.eval(s);
        let mut acc = 0.0;
        for (&v, &z) in row.iter().zip(weights.iter()) {
            acc += z * (v - f) * (v - f);
        }
        total += acc;
    }
    let var = total / (data.n_rows() as f64 * mass);
    var.sqrt().max(SIGMA_FLOOR)
}
