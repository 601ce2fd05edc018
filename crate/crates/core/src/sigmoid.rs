//! Four-parameter sigmoid trajectory `f(s) = d + a / (1 + exp(-b (s - c)))`.

use serde::{Deserialize, Serialize};

/// Logistic exponents are clamped to this magnitude before exponentiation.
pub const EXP_CLAMP: f64 = 500.0;

/// Shape of one cluster trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Height (signed).
    pub a: f64,
    /// Slope per DPS unit.
    pub b: f64,
    /// Inflection centre in DPS units.
    pub c: f64,
    /// Lower asymptote offset.
    pub d: f64,
}

/// Partial derivatives of the sigmoid at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidGrad {
    pub da: f64,
    pub db: f64,
    pub dc: f64,
    pub dd: f64,
    pub ds: f64,
}

impl SigmoidGrad {
    pub fn theta(&self) -> [f64; 4] {
        [self.da, self.db, self.dc, self.dd]
    }
}

impl TrajectoryParams {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn eval(&self, s: f64) -> f64 {
        sigmoid_eval(s, self)
    }
}

/// Logistic function and its derivative factor `σ(1-σ)`, both computed
/// without overflow.
#[inline]
fn logistic(z: f64) -> (f64, f64) {
    let z = z.clamp(-EXP_CLAMP, EXP_CLAMP);
    let e = (-z.abs()).exp();
    let denom = 1.0 + e;
    let sig = if z >= 0.0 { 1.0 / denom } else { e / denom };
    (sig, e / (denom * denom))
}

#[inline]
pub fn sigmoid_eval(s: f64, theta: &TrajectoryParams) -> f64 {
    let (sig, _) = logistic(theta.b * (s - theta.c));
    theta.d + theta.a * sig
}

#[inline]
pub fn sigmoid_grad(s: f64, theta: &TrajectoryParams) -> SigmoidGrad {
    let u = s - theta.c;
    let (sig, dsig) = logistic(theta.b * u);
    let slope = theta.a * dsig;
    SigmoidGrad {
        da: sig,
        db: slope * u,
        dc: -slope * theta.b,
        dd: 1.0,
        ds: slope * theta.b,
    }
}
