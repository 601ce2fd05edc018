//! User-chosen priors over trajectory shapes and subject stages.

use serde::{Deserialize, Serialize};

use crate::model::SubjectStage;
use crate::sigmoid::TrajectoryParams;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum ThetaPrior {
    /// Improper flat prior, `log p = 0`.
    #[default]
    Uniform,
    /// Independent normals on `(a, b, c, d)`.
    Gaussian {
        mean: TrajectoryParams,
        sd: [f64; 4],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum StagePrior {
    #[default]
    Uniform,
    /// Log-normal on `alpha` and normal on `beta`, independent.
    Gaussian {
        log_alpha_mean: f64,
        log_alpha_sd: f64,
        beta_mean: f64,
        beta_sd: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Priors {
    pub theta: ThetaPrior,
    pub stage: StagePrior,
}

impl Priors {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.theta, ThetaPrior::Uniform) && matches!(self.stage, StagePrior::Uniform)
    }
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

impl ThetaPrior {
    pub fn log_density(&self, theta: &TrajectoryParams) -> f64 {
        match self {
            ThetaPrior::Uniform => 0.0,
            ThetaPrior::Gaussian { mean, sd } => theta
                .to_array()
                .iter()
                .zip(mean.to_array())
                .zip(sd)
                .map(|((&x, m), &s)| normal_log_pdf(x, m, s))
                .sum(),
        }
    }

    /// Gradient of `log_density` with respect to `(a, b, c, d)`.
    pub fn grad(&self, theta: &TrajectoryParams) -> [f64; 4] {
        match self {
            ThetaPrior::Uniform => [0.0; 4],
            ThetaPrior::Gaussian { mean, sd } => {
                let x = theta.to_array();
                let m = mean.to_array();
                std::array::from_fn(|p| -(x[p] - m[p]) / (sd[p] * sd[p]))
            }
        }
    }
}

impl StagePrior {
    pub fn log_density(&self, stage: &SubjectStage) -> f64 {
        match *self {
            StagePrior::Uniform => 0.0,
            StagePrior::Gaussian {
                log_alpha_mean,
                log_alpha_sd,
                beta_mean,
                beta_sd,
            } => {
                let la = stage.alpha.ln();
                normal_log_pdf(la, log_alpha_mean, log_alpha_sd) - la
                    + normal_log_pdf(stage.beta, beta_mean, beta_sd)
            }
        }
    }

    /// Gradient of `log_density` with respect to `(alpha, beta)`.
    pub fn grad(&self, stage: &SubjectStage) -> [f64; 2] {
        match *self {
            StagePrior::Uniform => [0.0; 2],
            StagePrior::Gaussian {
                log_alpha_mean,
                log_alpha_sd,
                beta_mean,
                beta_sd,
            } => {
                let la = stage.alpha.ln();
                let d_alpha =
                    (-(la - log_alpha_mean) / (log_alpha_sd * log_alpha_sd) - 1.0) / stage.alpha;
                let d_beta = -(stage.beta - beta_mean) / (beta_sd * beta_sd);
                [d_alpha, d_beta]
            }
        }
    }
}
