//! Perturbed test sets and the metrics computed on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{laplace_scale, CalibrationError, PerturbationModel};
use crate::dataset::EncodedDataset;
use crate::model::{sigmoid, softplus, CategoryLayout, Coefficients, ModelError};

pub const DEFAULT_SETS: usize = 200;
pub const DEFAULT_BINS: usize = 10;
/// Margin kept between a shifted certainty and the edge of its domain.
pub const CLAMP_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("only one class present")]
    SingleClass,
    #[error("{0} probabilities but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("bin count must be at least 1")]
    Bins,
    #[error("perturbation model does not match the data: {0}")]
    Dimension(String),
    #[error("shifted scenarios need rho_x and u in the perturbation model")]
    MissingCertainty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// `sign(v) * b * -ln(1 - 2|v|)` for `v` uniform on `(-1/2, 1/2)`.
fn laplace<R: Rng>(rng: &mut R, b: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    let v: f64 = rng.random::<f64>() - 0.5;
    -b * v.signum() * (-2.0 * v.abs()).ln_1p()
}

pub fn check_model(ds: &EncodedDataset, pm: &PerturbationModel) -> Result<(), EvalError> {
    if pm.b.len() != ds.schema.n() {
        return Err(EvalError::Dimension(format!("{} scales for {} numerical features", pm.b.len(), ds.schema.n())));
    }
    if pm.rho_z.len() != ds.schema.m() || pm.cardinalities != ds.schema.cardinalities() {
        return Err(EvalError::Dimension("categorical certainties or cardinalities differ from the schema".into()));
    }
    Ok(())
}

/// Laplace noise on numerical features; each categorical value stays with
/// probability `rho_z` and otherwise moves to a uniformly chosen other
/// category. Labels are untouched.
pub fn perturb_with<R: Rng>(ds: &EncodedDataset, pm: &PerturbationModel, rng: &mut R) -> EncodedDataset {
    let (n, m) = (ds.schema.n(), ds.schema.m());
    let mut x = Vec::with_capacity(ds.len() * n);
    let mut cats = Vec::with_capacity(ds.len() * m);
    for i in 0..ds.len() {
        for (j, &v) in ds.x_row(i).iter().enumerate() {
            x.push(v + laplace(rng, pm.b[j]));
        }
        for (l, &k) in ds.categories_row(i).iter().enumerate() {
            let card = pm.cardinalities[l];
            if rng.random::<f64>() < pm.rho_z[l] {
                cats.push(k);
            } else {
                let other = rng.random_range(0..card - 1);
                cats.push(if other >= k { other + 1 } else { other });
            }
        }
    }
    ds.with_features(x, cats)
}

pub fn perturb_dataset(ds: &EncodedDataset, pm: &PerturbationModel, seed: u64) -> Result<EncodedDataset, EvalError> {
    check_model(ds, pm)?;
    Ok(perturb_with(ds, pm, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Test set `k` of a run seeded with `seed`: stream `k` of that seed.
pub fn perturbed_set(ds: &EncodedDataset, pm: &PerturbationModel, seed: u64, k: usize) -> EncodedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    perturb_with(ds, pm, &mut rng)
}

fn check_pair(probs: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Unweighted mean over equal-mass bins of `|mean prob - positive rate|`.
/// Points are ordered by `(prob, index)`; bin `b` takes ranks
/// `floor(b N / B) .. floor((b + 1) N / B)` and empty bins are skipped.
pub fn adaptive_calibration_error(probs: &[f64], labels: &[f64], bins: usize) -> Result<f64, EvalError> {
    check_pair(probs, labels)?;
    if bins == 0 {
        return Err(EvalError::Bins);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let total = probs.len();
    let mut sum = 0.0;
    let mut used = 0;
    for b in 0..bins {
        let lo = b * total / bins;
        let hi = (b + 1) * total / bins;
        if hi == lo {
            continue;
        }
        let idx = &order[lo..hi];
        let count = idx.len() as f64;
        let mean_p = idx.iter().map(|&i| probs[i]).sum::<f64>() / count;
        let rate = idx.iter().filter(|&&i| labels[i] > 0.0).count() as f64 / count;
        sum += (mean_p - rate).abs();
        used += 1;
    }
    Ok(sum / used as f64)
}

/// Mann-Whitney AUC with average ranks for tied scores.
pub fn auc(probs: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_pair(probs, labels)?;
    let pos = labels.iter().filter(|&&y| y > 0.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && probs[order[end + 1]] == probs[order[start]] {
            end += 1;
        }
        // ranks are 1-based
        let avg = (start + end) as f64 / 2.0 + 1.0;
        rank_sum += order[start..=end].iter().filter(|&&i| labels[i] > 0.0).count() as f64 * avg;
        start = end + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean log-loss of `beta` on a dataset.
pub fn mean_log_loss(beta: &Coefficients, ds: &EncodedDataset) -> f64 {
    let layout = CategoryLayout::new(&ds.schema);
    let total: f64 = (0..ds.len())
        .map(|i| softplus(-ds.label(i) * beta.score_categories(&layout, ds.x_row(i), ds.categories_row(i))))
        .sum();
    total / ds.len().max(1) as f64
}

pub fn predict_all(beta: &Coefficients, ds: &EncodedDataset) -> Vec<f64> {
    let layout = CategoryLayout::new(&ds.schema);
    (0..ds.len()).map(|i| sigmoid(beta.score_categories(&layout, ds.x_row(i), ds.categories_row(i)))).collect()
}

/// How the certainties are changed before generating test sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShiftSpec {
    /// Expected shift: the calibrated certainties as they are.
    None,
    /// Every certainty moved by `by`.
    Shift { by: f64 },
    /// Every certainty redrawn uniformly within `radius` of its value.
    Radius { radius: f64 },
}

impl ShiftSpec {
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::None => "expected".into(),
            ShiftSpec::Shift { by } => format!("shift {by:+}"),
            ShiftSpec::Radius { radius } => format!("radius {radius}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRun {
    /// Number of perturbed test sets.
    pub sets: usize,
    pub seed: u64,
    pub shift: ShiftSpec,
    pub bins: usize,
}

impl PerturbationRun {
    pub fn expected(seed: u64) -> Self {
        Self { sets: DEFAULT_SETS, seed, shift: ShiftSpec::None, bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SetMetrics {
    pub ace: f64,
    pub auc: f64,
    pub log_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MetricDefinitions {
    pub bins: usize,
    pub binning: String,
    pub ace_aggregation: String,
    pub auc_ties: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MetricReport {
    pub scenario: String,
    pub shift: ShiftSpec,
    pub sets: usize,
    pub seed: u64,
    pub definitions: MetricDefinitions,
    pub worst_ace: f64,
    pub mean_ace: f64,
    pub worst_auc: f64,
    pub mean_auc: f64,
    pub worst_log_loss: f64,
    pub mean_log_loss: f64,
    pub per_set: Vec<SetMetrics>,
}

impl MetricReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["set", "ace", "auc", "log_loss"])?;
        for (k, s) in self.per_set.iter().enumerate() {
            w.write_record([k.to_string(), s.ace.to_string(), s.auc.to_string(), s.log_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn clamp_certainty(rho: f64, floor: f64) -> f64 {
    rho.clamp(floor + CLAMP_MARGIN, 1.0 - CLAMP_MARGIN)
}

/// Applies a shift scenario to the certainties and recomputes the scales.
pub fn shifted_model(pm: &PerturbationModel, shift: ShiftSpec, seed: u64) -> Result<PerturbationModel, EvalError> {
    if shift == ShiftSpec::None {
        return Ok(pm.clone());
    }
    if pm.rho_x.iter().chain(&pm.u).any(|v| !v.is_finite()) {
        return Err(EvalError::MissingCertainty);
    }
    // one draw per scenario, on a stream no test set uses
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut move_rho = |rho: f64, floor: f64| -> f64 {
        let moved = match shift {
            ShiftSpec::None => rho,
            ShiftSpec::Shift { by } => rho + by,
            ShiftSpec::Radius { radius } => rho + radius * (2.0 * rng.random::<f64>() - 1.0),
        };
        clamp_certainty(moved, floor)
    };
    let rho_x: Vec<f64> = pm.rho_x.iter().map(|&r| move_rho(r, 0.0)).collect();
    let rho_z: Vec<f64> = pm.rho_z.iter().zip(&pm.cardinalities).map(|(&r, &k)| move_rho(r, 1.0 / k as f64)).collect();
    let b = rho_x.iter().zip(&pm.u).map(|(&r, &u)| laplace_scale(r, u)).collect::<Result<Vec<_>, _>>()?;
    Ok(PerturbationModel { rho_x, u: pm.u.clone(), b, rho_z, cardinalities: pm.cardinalities.clone() })
}

/// Metrics of `beta` over `run.sets` perturbed copies of `test`. Set `k`
/// uses stream `k` of the master seed, so results do not depend on threads.
pub fn evaluate_under_shift(
    beta: &Coefficients,
    test: &EncodedDataset,
    run: &PerturbationRun,
    pm: &PerturbationModel,
) -> Result<MetricReport, EvalError> {
    beta.validate(&test.schema)?;
    check_model(test, pm)?;
    if run.sets == 0 || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let model = shifted_model(pm, run.shift, run.seed)?;
    let per_set = (0..run.sets)
        .into_par_iter()
        .map(|k| {
            let ds = perturbed_set(test, &model, run.seed, k);
            let probs = predict_all(beta, &ds);
            Ok(SetMetrics {
                ace: adaptive_calibration_error(&probs, ds.labels(), run.bins)?,
                auc: auc(&probs, ds.labels())?,
                log_loss: mean_log_loss(beta, &ds),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let count = per_set.len() as f64;
    let mean = |f: fn(&SetMetrics) -> f64| per_set.iter().map(f).sum::<f64>() / count;
    let max = |f: fn(&SetMetrics) -> f64| per_set.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let min = |f: fn(&SetMetrics) -> f64| per_set.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(MetricReport {
        scenario: run.shift.label(),
        shift: run.shift,
        sets: run.sets,
        seed: run.seed,
        definitions: MetricDefinitions {
            bins: run.bins,
            binning: "equal-mass over (probability, index) order".into(),
            ace_aggregation: "unweighted mean of |mean probability - positive rate| over non-empty bins".into(),
            auc_ties: "average ranks".into(),
        },
        worst_ace: max(|s| s.ace),
        mean_ace: mean(|s| s.ace),
        worst_auc: min(|s| s.auc),
        mean_auc: mean(|s| s.auc),
        worst_log_loss: max(|s| s.log_loss),
        mean_log_loss: mean(|s| s.log_loss),
        per_set,
    })
}
