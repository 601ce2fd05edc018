//! Fitted model parameters: trajectories, noise, subject stages, MRF
//! strength and per-vertex cluster posteriors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::sigmoid::TrajectoryParams;

/// Affine map from age to disease progression score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectStage {
    pub alpha: f64,
    pub beta: f64,
}

impl SubjectStage {
    pub const IDENTITY: SubjectStage = SubjectStage {
        alpha: 1.0,
        beta: 0.0,
    };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(DiveError::ParameterDomain(format!(
                "stage requires finite alpha > 0 and finite beta, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    #[inline]
    pub fn dps(&self, age: f64) -> f64 {
        dps(self, age)
    }
}

#[inline]
pub fn dps(stage: &SubjectStage, age: f64) -> f64 {
    stage.alpha * age + stage.beta
}

/// Potts-style clique strength `λ`: matching neighbours score `exp(λ)`,
/// differing neighbours `exp(-λ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfPrior {
    pub lambda: f64,
}

impl MrfPrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(DiveError::ParameterDomain(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn log_psi(&self, same_cluster: bool) -> f64 {
        if same_cluster {
            self.lambda
        } else {
            -self.lambda * self.lambda
        }
    }
}

/// All model parameters plus the `L × K` posterior matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub trajectories: Vec<TrajectoryParams>,
    pub sigmas: Vec<f64>,
    pub stages: Vec<SubjectStage>,
    pub mrf: MrfPrior,
    pub posteriors: Array2<f64>,
}

impl ModelState {
    pub fn new(
        trajectories: Vec<TrajectoryParams>,
        sigmas: Vec<f64>,
        stages: Vec<SubjectStage>,
        mrf: MrfPrior,
        posteriors: Array2<f64>,
    ) -> Result<Self> {
        let state = Self {
            trajectories,
            sigmas,
            stages,
            mrf,
            posteriors,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.posteriors.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        if k == 0 {
            return Err(DiveError::ParameterDomain("model has no clusters".into()));
        }
        if self.sigmas.len() != k || self.posteriors.ncols() != k {
            return Err(DiveError::ParameterDomain(format!(
                "cluster count mismatch: {k} trajectories, {} sigmas, {} posterior columns",
                self.sigmas.len(),
                self.posteriors.ncols()
            )));
        }
        if let Some((i, t)) = self.trajectories.iter().enumerate().find(|(_, t)| !t.is_finite()) {
            return Err(DiveError::ParameterDomain(format!(
                "trajectory {i} is not finite: {t:?}"
            )));
        }
        if let Some((i, s)) = self
            .sigmas
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
        {
            return Err(DiveError::ParameterDomain(format!("sigma {i} = {s} must be > 0")));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if !(st.alpha > 0.0 && st.alpha.is_finite() && st.beta.is_finite()) {
                return Err(DiveError::ParameterDomain(format!(
                    "stage {i} invalid: {st:?}"
                )));
            }
        }
        MrfPrior::new(self.mrf.lambda)?;
        for (l, row) in self.posteriors.rows().into_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&z| !(z >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(DiveError::ParameterDomain(format!(
                    "posterior row {l} is not on the simplex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Relabels clusters so that new cluster `j` is old cluster `perm[j]`.
    pub fn permute_clusters(&self, perm: &[usize]) -> ModelState {
        let k = self.k();
        assert_eq!(perm.len(), k);
        let mut posteriors = Array2::zeros(self.posteriors.raw_dim());
        for (j, &old) in perm.iter().enumerate() {
            posteriors.column_mut(j).assign(&self.posteriors.column(old));
        }
        ModelState {
            trajectories: perm.iter().map(|&o| self.trajectories[o]).collect(),
            sigmas: perm.iter().map(|&o| self.sigmas[o]).collect(),
            stages: self.stages.clone(),
            mrf: self.mrf,
            posteriors,
        }
    }

    /// Most probable cluster per vertex (lowest index on ties).
    pub fn hard_labels(&self) -> Vec<usize> {
        self.posteriors
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Total posterior mass per cluster.
    pub fn cluster_mass(&self) -> Vec<f64> {
        self.posteriors.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// One-hot posterior matrix for the given labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Array2<f64>> {
    let mut z = Array2::zeros((labels.len(), k));
    for (l, &lab) in labels.iter().enumerate() {
        if lab >= k {
            return Err(DiveError::Config(format!(
                "label {lab} at vertex {l} exceeds cluster count {k}"
            )));
        }
        z[[l, lab]] = 1.0;
    }
    Ok(z)
}
