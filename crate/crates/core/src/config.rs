//! Run configuration shared by all commands.
//!
//! Configs are JSON, reject unknown keys, and carry a schema version. Relative
//! data paths resolve against the directory of the config file.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Precision;
use crate::dataset::{self, ColumnKind, CsvOptions, EncodedDataset};
use crate::eval::{ShiftSpec, DEFAULT_BINS, DEFAULT_SETS};
use crate::solve::{BackendKind, Route, SubgradientOptions, TrainOptions};
use crate::synthetic::{generate, SyntheticSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Bounds applied to sampled certainties.
pub const SAMPLED_RHO_MIN: f64 = 0.05;
pub const SAMPLED_RHO_MAX: f64 = 0.95;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSource,
    /// Fraction of rows held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub certainty: CertaintyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        label: String,
        columns: BTreeMap<String, ColumnKind>,
        #[serde(default)]
        drop: Vec<String>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
    /// Logistic-model data; the seed is taken from the run seed.
    Synthetic {
        points: usize,
        numerical: usize,
        cardinalities: Vec<usize>,
        #[serde(default = "default_coef_scale")]
        coef_scale: f64,
    },
}

fn default_delimiter() -> char {
    ','
}

fn default_coef_scale() -> f64 {
    1.0
}

/// Per-feature certainty values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CertaintyRule {
    /// One value per feature, in schema order.
    Values(Vec<f64>),
    /// The same value for every feature.
    Constant(f64),
    /// Independent normal draws, clamped to the valid range.
    Sample { mean: f64, stddev: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HalfWidthRule {
    Values(Vec<f64>),
    /// Multiple of each feature's training-set standard deviation.
    StddevFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CertaintyConfig {
    pub rho_x: CertaintyRule,
    pub rho_z: CertaintyRule,
    #[serde(default = "default_half_width")]
    pub u: HalfWidthRule,
    pub theta: f64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_half_width() -> HalfWidthRule {
    HalfWidthRule::StddevFraction(0.4)
}

fn default_precision() -> Precision {
    Precision::Integer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_route")]
    pub route: Route,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Iteration budget of each conic solve.
    #[serde(default)]
    pub backend_iterations: Option<u32>,
    #[serde(default)]
    pub multi_cut: bool,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default)]
    pub subgradient: SubgradientOptions,
}

fn default_route() -> Route {
    Route::Graph
}

fn default_tol() -> f64 {
    TrainOptions::default().tol
}

fn default_max_iter() -> usize {
    TrainOptions::default().max_iter
}

fn default_cap() -> u64 {
    crate::separation::DEFAULT_ENUMERATION_CAP
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            route: default_route(),
            backend: BackendKind::default(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            backend_iterations: None,
            multi_cut: false,
            time_limit_secs: None,
            enumeration_cap: default_cap(),
            subgradient: SubgradientOptions::default(),
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            backend: self.backend,
            tol: self.tol,
            max_iter: self.max_iter,
            backend_iterations: self.backend_iterations,
            multi_cut: self.multi_cut,
            time_limit: self.time_limit_secs.map(Duration::from_secs_f64),
            enumeration_cap: self.enumeration_cap,
            subgradient: self.subgradient.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_sets")]
    pub sets: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// The expected-shift scenario is always run first.
    #[serde(default)]
    pub scenarios: Vec<ShiftSpec>,
    /// Also write per-set metrics as CSV.
    #[serde(default)]
    pub per_set_csv: bool,
}

fn default_sets() -> usize {
    DEFAULT_SETS
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { sets: DEFAULT_SETS, bins: DEFAULT_BINS, scenarios: Vec::new(), per_set_csv: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_routes")]
    pub routes: Vec<Route>,
    /// Relative objective tolerance between routes.
    #[serde(default = "default_bench_tol")]
    pub tolerance: f64,
    #[serde(default = "default_regimes")]
    pub precisions: Vec<Precision>,
    /// Number of seeds, starting at the run seed.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Time the cutting-plane route with single and multiple cuts per round.
    #[serde(default = "default_both_cut_modes")]
    pub both_cut_modes: bool,
}

fn default_bench_routes() -> Vec<Route> {
    vec![Route::CuttingPlane, Route::Graph]
}

fn default_bench_tol() -> f64 {
    1e-4
}

fn default_regimes() -> Vec<Precision> {
    vec![Precision::Integer, Precision::OneDecimal]
}

fn default_repeats() -> usize {
    1
}

fn default_both_cut_modes() -> bool {
    true
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            routes: default_bench_routes(),
            tolerance: default_bench_tol(),
            precisions: default_regimes(),
            repeats: default_repeats(),
            both_cut_modes: default_both_cut_modes(),
        }
    }
}

/// JSON schema of [`RunConfig`].
pub fn config_schema() -> schemars::schema::RootSchema {
    schemars::schema_for!(RunConfig)
}

impl RunConfig {
    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        if let (Some(base), DataSource::Csv { path, .. }) = (base, &mut cfg.data) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_json(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version { found: self.schema_version });
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} must lie in (0, 1)", self.test_fraction));
        }
        for (name, rule) in [("rho_x", &self.certainty.rho_x), ("rho_z", &self.certainty.rho_z)] {
            if let CertaintyRule::Sample { stddev, mean } = rule {
                if !(*stddev >= 0.0 && stddev.is_finite() && mean.is_finite()) {
                    return bad(format!("{name}: sampling rule needs a finite mean and stddev >= 0"));
                }
            }
        }
        if let HalfWidthRule::StddevFraction(f) = self.certainty.u {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("u: stddev fraction {f} must be positive"));
            }
        }
        let s = &self.solver;
        if !(s.tol > 0.0) || s.max_iter == 0 || s.backend_iterations == Some(0) {
            return bad("solver: tol must be positive and iteration limits at least 1".into());
        }
        if s.time_limit_secs.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
            return bad("solver: time_limit_secs must be a nonnegative number".into());
        }
        if self.evaluation.sets == 0 || self.evaluation.bins == 0 {
            return bad("evaluation: sets and bins must be positive".into());
        }
        if !(self.bench.tolerance > 0.0) || self.bench.repeats == 0 {
            return bad("bench: tolerance must be positive and repeats at least 1".into());
        }
        if let DataSource::Synthetic { points, cardinalities, .. } = &self.data {
            if *points < 4 || cardinalities.iter().any(|&k| k < 2) {
                return bad("data: synthetic sets need 4+ points and cardinalities of 2+".into());
            }
        }
        Ok(())
    }

    /// Loads or generates the full dataset.
    pub fn dataset(&self) -> Result<EncodedDataset, ConfigError> {
        self.dataset_with_seed(self.seed)
    }

    pub fn dataset_with_seed(&self, seed: u64) -> Result<EncodedDataset, ConfigError> {
        match &self.data {
            DataSource::Csv { path, label, columns, drop, delimiter } => {
                if !delimiter.is_ascii() {
                    return Err(ConfigError::Invalid(format!("delimiter {delimiter:?} must be ASCII")));
                }
                let kinds: HashMap<String, ColumnKind> = columns.iter().map(|(k, v)| (k.clone(), *v)).collect();
                let opts =
                    CsvOptions { delimiter: *delimiter as u8, drop_columns: drop.clone(), ..CsvOptions::default() };
                let raw = dataset::load_csv(path, label, &kinds, &opts)?;
                Ok(dataset::encode(&dataset::preprocess(&raw)?)?)
            }
            DataSource::Synthetic { points, numerical, cardinalities, coef_scale } => {
                let spec = SyntheticSpec {
                    points: *points,
                    numerical: *numerical,
                    cardinalities: cardinalities.clone(),
                    coef_scale: *coef_scale,
                    seed,
                };
                Ok(generate(&spec).0)
            }
        }
    }

    /// Train/test split of the configured data.
    pub fn split(&self) -> Result<(EncodedDataset, EncodedDataset), ConfigError> {
        let ds = self.dataset()?;
        Ok(dataset::split(&ds, self.test_fraction, self.seed)?)
    }
}

/// Resolves a certainty rule for `count` features. Sampled values use their
/// own RNG stream and are clamped to `[floor_l, SAMPLED_RHO_MAX]`.
pub fn resolve_certainty(
    rule: &CertaintyRule,
    floors: &[f64],
    seed: u64,
    stream: u64,
) -> Result<Vec<f64>, ConfigError> {
    match rule {
        CertaintyRule::Values(v) => {
            if v.len() != floors.len() {
                return Err(ConfigError::Invalid(format!(
                    "expected {} certainty values, got {}",
                    floors.len(),
                    v.len()
                )));
            }
            Ok(v.clone())
        }
        CertaintyRule::Constant(c) => Ok(vec![*c; floors.len()]),
        CertaintyRule::Sample { mean, stddev } => {
            let normal = Normal::new(*mean, *stddev).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            Ok(floors.iter().map(|&lo| normal.sample(&mut rng).clamp(lo, SAMPLED_RHO_MAX)).collect())
        }
    }
}
