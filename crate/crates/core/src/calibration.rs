//! Closed-form calibration of the ambiguity set and of the matching shift model.
//!
//! Numerical shifts are Laplace with scale `b = -u / ln(1 - rho_x)`, which
//! gives `P(|shift| <= u) = rho_x`. Categorical features stay put with
//! probability `rho_z` and otherwise move uniformly to another category.
//! The transport weights are the log-likelihood ratios of those models:
//!
//! ```text
//! gamma_j   = -ln(1 - rho_xj) / u_j
//! delta_l   = ln(rho_zl (|C_l| - 1) / (1 - rho_zl))
//! epsilon   = -ln(theta)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("probability of certainty {rho} for a numerical feature must lie in (0, 1)")]
    NumericalCertainty { rho: f64 },
    #[error("interval half-width {u} must be positive")]
    HalfWidth { u: f64 },
    #[error(
        "probability of certainty {rho} for a feature with {cardinality} categories must lie in [1/{cardinality}, 1)"
    )]
    CategoricalCertainty { rho: f64, cardinality: usize },
    #[error("categorical feature needs at least 2 categories, got {0}")]
    Cardinality(usize),
    #[error("robustness level theta = {0} must lie in (0, 1]")]
    Theta(f64),
    #[error("{what}: expected {expected} entries, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("weight {name} = {value} must be positive and finite")]
    Weight { name: String, value: f64 },
    #[error("radius epsilon = {0} must be nonnegative and finite")]
    Radius(f64),
}

pub fn calibrate_gamma(rho: f64, u: f64) -> Result<f64, CalibrationError> {
    check_numerical(rho, u)?;
    Ok(-(-rho).ln_1p() / u)
}

pub fn laplace_scale(rho: f64, u: f64) -> Result<f64, CalibrationError> {
    check_numerical(rho, u)?;
    Ok(-u / (-rho).ln_1p())
}

fn check_numerical(rho: f64, u: f64) -> Result<(), CalibrationError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(CalibrationError::NumericalCertainty { rho });
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(CalibrationError::HalfWidth { u });
    }
    Ok(())
}

pub fn calibrate_delta(rho: f64, cardinality: usize) -> Result<f64, CalibrationError> {
    if cardinality < 2 {
        return Err(CalibrationError::Cardinality(cardinality));
    }
    let k = cardinality as f64;
    if !(rho * k >= 1.0 - 4.0 * f64::EPSILON && rho < 1.0) {
        return Err(CalibrationError::CategoricalCertainty { rho, cardinality });
    }
    let ratio = rho * (k - 1.0) / (1.0 - rho);
    // rho = 1/K gives a ratio of exactly one only up to rounding
    if ratio <= 1.0 + 4.0 * f64::EPSILON {
        return Ok(0.0);
    }
    Ok(ratio.ln())
}

pub fn calibrate_epsilon(theta: f64) -> Result<f64, CalibrationError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CalibrationError::Theta(theta));
    }
    Ok(-theta.ln())
}

/// Rounding applied to categorical weights before building the DP state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Integer,
    OneDecimal,
    None,
}

impl Precision {
    /// Grid on which weighted distances are keyed. Unrounded weights use a
    /// grid fine enough that distinct subset sums never collide in practice.
    pub fn step(self) -> f64 {
        match self {
            Precision::Integer => 1.0,
            Precision::OneDecimal => 0.1,
            Precision::None => 1e-9,
        }
    }
}

fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero
    v.round()
}

/// Rounds weights to the given precision, clamping values that round to zero
/// up to one step.
pub fn round_weights(delta: &[f64], precision: Precision) -> Vec<f64> {
    delta
        .iter()
        .map(|&d| match precision {
            Precision::Integer => round_half_away(d).max(1.0),
            Precision::OneDecimal => {
                let units = round_half_away(d * 10.0).max(1.0);
                units / 10.0
            }
            Precision::None => d,
        })
        .collect()
}

/// User-facing probabilities of certainty and robustness level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintySpec {
    pub rho_x: Vec<f64>,
    pub u: Vec<f64>,
    pub rho_z: Vec<f64>,
    pub theta: f64,
}

/// Weights and radius of the Wasserstein ball. Label shifts carry infinite
/// cost and are not represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AmbiguityParams {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub precision: Precision,
}

impl AmbiguityParams {
    pub fn new(gamma: Vec<f64>, delta: Vec<f64>, epsilon: f64, precision: Precision) -> Result<Self, CalibrationError> {
        for (j, &g) in gamma.iter().enumerate() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CalibrationError::Weight { name: format!("gamma[{j}]"), value: g });
            }
        }
        for (l, &d) in delta.iter().enumerate() {
            if !(d > 0.0 && d.is_finite()) {
                return Err(CalibrationError::Weight { name: format!("delta[{l}]"), value: d });
            }
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(CalibrationError::Radius(epsilon));
        }
        Ok(Self { gamma, delta, epsilon, precision })
    }

    /// All weights equal to one, the equal-weight special case.
    pub fn unit(n: usize, m: usize, epsilon: f64, precision: Precision) -> Self {
        Self { gamma: vec![1.0; n], delta: vec![1.0; m], epsilon, precision }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn check_dims(&self, n: usize, m: usize) -> Result<(), CalibrationError> {
        if self.gamma.len() != n {
            return Err(CalibrationError::Length { what: "gamma", expected: n, got: self.gamma.len() });
        }
        if self.delta.len() != m {
            return Err(CalibrationError::Length { what: "delta", expected: m, got: self.delta.len() });
        }
        Ok(())
    }
}

/// Calibrated weights before and after rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Calibration {
    pub gamma: Vec<f64>,
    pub delta_raw: Vec<f64>,
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub laplace_scales: Vec<f64>,
    pub precision: Precision,
}

impl Calibration {
    pub fn params(&self) -> Result<AmbiguityParams, CalibrationError> {
        AmbiguityParams::new(self.gamma.clone(), self.delta.clone(), self.epsilon, self.precision)
    }
}

pub fn calibrate(
    spec: &CertaintySpec,
    cardinalities: &[usize],
    precision: Precision,
) -> Result<Calibration, CalibrationError> {
    if spec.u.len() != spec.rho_x.len() {
        return Err(CalibrationError::Length { what: "u", expected: spec.rho_x.len(), got: spec.u.len() });
    }
    if spec.rho_z.len() != cardinalities.len() {
        return Err(CalibrationError::Length { what: "rho_z", expected: cardinalities.len(), got: spec.rho_z.len() });
    }
    let gamma = spec.rho_x.iter().zip(&spec.u).map(|(&r, &u)| calibrate_gamma(r, u)).collect::<Result<Vec<_>, _>>()?;
    let laplace_scales =
        spec.rho_x.iter().zip(&spec.u).map(|(&r, &u)| laplace_scale(r, u)).collect::<Result<Vec<_>, _>>()?;
    let delta_raw =
        spec.rho_z.iter().zip(cardinalities).map(|(&r, &k)| calibrate_delta(r, k)).collect::<Result<Vec<_>, _>>()?;
    let delta = round_weights(&delta_raw, precision);
    Ok(Calibration { gamma, delta_raw, delta, epsilon: calibrate_epsilon(spec.theta)?, laplace_scales, precision })
}

/// Laplace/uniform-categorical shift model used to generate perturbed test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PerturbationModel {
    pub rho_x: Vec<f64>,
    pub u: Vec<f64>,
    /// Laplace scale per numerical feature; zero means no numerical noise.
    pub b: Vec<f64>,
    pub rho_z: Vec<f64>,
    pub cardinalities: Vec<usize>,
}

impl PerturbationModel {
    pub fn from_certainty(
        rho_x: &[f64],
        u: &[f64],
        rho_z: &[f64],
        cardinalities: &[usize],
    ) -> Result<Self, CalibrationError> {
        if u.len() != rho_x.len() {
            return Err(CalibrationError::Length { what: "u", expected: rho_x.len(), got: u.len() });
        }
        if rho_z.len() != cardinalities.len() {
            return Err(CalibrationError::Length { what: "rho_z", expected: cardinalities.len(), got: rho_z.len() });
        }
        let b = rho_x.iter().zip(u).map(|(&r, &w)| laplace_scale(r, w)).collect::<Result<Vec<_>, _>>()?;
        for (&r, &k) in rho_z.iter().zip(cardinalities) {
            if k < 2 || !(r * k as f64 >= 1.0 && r <= 1.0) {
                return Err(CalibrationError::CategoricalCertainty { rho: r, cardinality: k });
            }
        }
        Ok(Self {
            rho_x: rho_x.to_vec(),
            u: u.to_vec(),
            b,
            rho_z: rho_z.to_vec(),
            cardinalities: cardinalities.to_vec(),
        })
    }

    /// Model with explicit scales, e.g. `b = 0` for a no-noise run.
    pub fn from_scales(b: Vec<f64>, rho_z: Vec<f64>, cardinalities: Vec<usize>) -> Self {
        let n = b.len();
        Self { rho_x: vec![f64::NAN; n], u: vec![f64::NAN; n], b, rho_z, cardinalities }
    }
}
