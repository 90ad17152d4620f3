//! Logistic model coefficients, the log-loss, and the weighted ground distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::AmbiguityParams;
use crate::dataset::DatasetSchema;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model was trained for schema {expected}, data has schema {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("coefficient {0} is not finite")]
    NonFinite(usize),
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Where each categorical feature's block sits in `beta_z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryLayout {
    pub offsets: Vec<usize>,
    pub cardinalities: Vec<usize>,
}

impl CategoryLayout {
    pub fn new(schema: &DatasetSchema) -> Self {
        Self { offsets: schema.block_offsets(), cardinalities: schema.cardinalities() }
    }

    pub fn from_cardinalities(cardinalities: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(cardinalities.len());
        let mut acc = 0;
        for &k in cardinalities {
            offsets.push(acc);
            acc += k - 1;
        }
        Self { offsets, cardinalities: cardinalities.to_vec() }
    }

    pub fn m(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn width(&self) -> usize {
        self.cardinalities.iter().map(|k| k - 1).sum()
    }

    /// Encoded column for category `k` of feature `l`, `None` for the reference.
    pub fn column(&self, l: usize, k: usize) -> Option<usize> {
        (k + 1 < self.cardinalities[l]).then(|| self.offsets[l] + k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Coefficients {
    pub intercept: f64,
    pub beta_x: Vec<f64>,
    pub beta_z: Vec<f64>,
}

impl Coefficients {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self { intercept: 0.0, beta_x: vec![0.0; n], beta_z: vec![0.0; c] }
    }

    pub fn for_schema(schema: &DatasetSchema) -> Self {
        Self::zeros(schema.n(), schema.encoded_width())
    }

    /// Flat `(beta_0, beta_x, beta_z)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.beta_x.len() + self.beta_z.len());
        v.push(self.intercept);
        v.extend_from_slice(&self.beta_x);
        v.extend_from_slice(&self.beta_z);
        v
    }

    pub fn from_slice(v: &[f64], n: usize) -> Self {
        Self { intercept: v[0], beta_x: v[1..1 + n].to_vec(), beta_z: v[1 + n..].to_vec() }
    }

    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), ModelError> {
        if self.beta_x.len() != schema.n() || self.beta_z.len() != schema.encoded_width() {
            return Err(ModelError::Dimension(format!(
                "coefficients have (n={}, c={}), schema has (n={}, c={})",
                self.beta_x.len(),
                self.beta_z.len(),
                schema.n(),
                schema.encoded_width()
            )));
        }
        if let Some(bad) = self.to_vec().iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(bad));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_vec().iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `beta_0 + beta_x . x`, the part of the score that does not depend on `z`.
    pub fn numeric_score(&self, x: &[f64]) -> f64 {
        self.intercept + self.beta_x.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Contribution `beta_zl . z_l` of category `k` of feature `l`.
    pub fn category_weight(&self, layout: &CategoryLayout, l: usize, k: usize) -> f64 {
        layout.column(l, k).map_or(0.0, |col| self.beta_z[col])
    }

    pub fn score(&self, x: &[f64], z: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.beta_x.len() {
            return Err(ModelError::Dimension(format!(
                "x has {} entries, model expects {}",
                x.len(),
                self.beta_x.len()
            )));
        }
        if z.len() != self.beta_z.len() {
            return Err(ModelError::Dimension(format!(
                "z has {} entries, model expects {}",
                z.len(),
                self.beta_z.len()
            )));
        }
        Ok(self.numeric_score(x) + self.beta_z.iter().zip(z).map(|(b, v)| b * v).sum::<f64>())
    }

    /// Score with categorical features given as category indices.
    pub fn score_categories(&self, layout: &CategoryLayout, x: &[f64], categories: &[usize]) -> f64 {
        self.numeric_score(x)
            + categories.iter().enumerate().map(|(l, &k)| self.category_weight(layout, l, k)).sum::<f64>()
    }
}

/// `log(1 + exp(-y (beta_0 + beta_x . x + beta_z . z)))`.
pub fn log_loss(beta: &Coefficients, x: &[f64], z: &[f64], y: f64) -> Result<f64, ModelError> {
    Ok(softplus(-y * beta.score(x, z)?))
}

/// Probability of label +1.
pub fn predict_proba(beta: &Coefficients, x: &[f64], z: &[f64]) -> Result<f64, ModelError> {
    Ok(sigmoid(beta.score(x, z)?))
}

/// Distance value; label disagreement is an explicit infinite variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    Finite(f64),
    Infinite,
}

impl Distance {
    pub fn value(self) -> f64 {
        match self {
            Distance::Finite(d) => d,
            Distance::Infinite => f64::INFINITY,
        }
    }
}

/// A single data point with categorical features as category indices.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub x: &'a [f64],
    pub categories: &'a [usize],
    pub y: f64,
}

/// Weighted ground distance between two points; label shifts cost infinity.
pub fn distance(a: Point<'_>, b: Point<'_>, params: &AmbiguityParams) -> Distance {
    if a.y != b.y {
        return Distance::Infinite;
    }
    let numeric: f64 = params.gamma.iter().zip(a.x.iter().zip(b.x)).map(|(g, (p, q))| g * (p - q).abs()).sum();
    let categorical: f64 = params
        .delta
        .iter()
        .zip(a.categories.iter().zip(b.categories))
        .filter(|(_, (p, q))| p != q)
        .map(|(d, _)| d)
        .sum();
    Distance::Finite(numeric + categorical)
}

/// Weighted categorical mismatch `sum_l delta_l 1{z_l != z'_l}`.
pub fn categorical_distance(delta: &[f64], a: &[usize], b: &[usize]) -> f64 {
    delta.iter().zip(a.iter().zip(b)).filter(|(_, (p, q))| p != q).map(|(d, _)| d).sum()
}

/// Dual multipliers of the Wasserstein constraint (`lambda`) and the
/// per-sample epigraph variables (`r`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub r: Vec<f64>,
}

impl DualState {
    /// Largest violation of `|beta_xj| <= lambda gamma_j` (non-positive when feasible).
    pub fn norm_bound_violation(&self, beta: &Coefficients, gamma: &[f64]) -> f64 {
        let mut worst = -self.lambda;
        for (b, g) in beta.beta_x.iter().zip(gamma) {
            worst = worst.max(b.abs() - self.lambda * g);
        }
        worst
    }

    pub fn objective(&self, epsilon: f64) -> f64 {
        self.lambda * epsilon + self.r.iter().sum::<f64>() / self.r.len().max(1) as f64
    }
}

/// Coefficients tagged with the schema they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ModelFile {
    pub schema_fingerprint: String,
    pub coefficients: Coefficients,
    pub schema: DatasetSchema,
}

impl ModelFile {
    pub fn new(schema: &DatasetSchema, coefficients: Coefficients) -> Self {
        Self { schema_fingerprint: schema.fingerprint(), coefficients, schema: schema.clone() }
    }

    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<(), ModelError> {
        let found = schema.fingerprint();
        if found != self.schema_fingerprint {
            return Err(ModelError::SchemaMismatch { expected: self.schema_fingerprint.clone(), found });
        }
        self.coefficients.validate(schema)
    }
}
