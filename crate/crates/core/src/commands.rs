//! The operations behind each CLI command. Every command is a function of
//! the config and seed; results are plain serializable values so the
//! caller decides where they go.

use std::path::{Path, PathBuf};
use std::time::Instant;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{
    calibrate_delta, calibrate_epsilon, calibrate_gamma, laplace_scale, round_weights, AmbiguityParams,
    CalibrationError, PerturbationModel, Precision,
};
use crate::config::{
    resolve_certainty, ConfigError, HalfWidthRule, RunConfig, SAMPLED_RHO_MAX, SAMPLED_RHO_MIN, SCHEMA_VERSION,
};
use crate::dataset::{DatasetError, EncodedDataset};
use crate::eval::{
    check_model, evaluate_under_shift, perturbed_set, shifted_model, EvalError, MetricReport, PerturbationRun,
    ShiftSpec,
};
use crate::graph::GraphSet;
use crate::model::{ModelError, ModelFile};
use crate::separation::StateSpace;
use crate::solve::{train, Route, TrainError, TrainOptions, TrainReport, TrainStatus};

/// RNG streams of the run seed used for sampled certainties.
const RHO_X_STREAM: u64 = 1;
const RHO_Z_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("feature {feature:?}: {source}")]
    Calibration { feature: String, source: CalibrationError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CommandError {
    /// 2 for bad input, 3 when a solver gives up.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Train(TrainError::Solver { .. }) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NumericalWeight {
    pub name: String,
    pub rho: f64,
    pub u: f64,
    pub gamma: f64,
    /// Laplace scale `b` of the matching shift model.
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategoricalWeight {
    pub name: String,
    pub cardinality: usize,
    pub rho: f64,
    pub delta_raw: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Provenance {
    pub seed: u64,
    pub train_rows: usize,
    pub schema_fingerprint: String,
    pub rho_x_rule: String,
    pub rho_z_rule: String,
    pub u_rule: String,
    /// Clamp applied to sampled certainties (`rho_z` uses `1/|C|` as floor).
    pub sampled_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CalibrationOutput {
    pub schema_version: u32,
    pub numerical: Vec<NumericalWeight>,
    pub categorical: Vec<CategoricalWeight>,
    pub theta: f64,
    pub epsilon: f64,
    pub precision: Precision,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl CalibrationOutput {
    pub fn params(&self) -> Result<AmbiguityParams, CalibrationError> {
        self.params_with(self.precision)
    }

    /// Same calibration with the categorical weights rounded to `precision`.
    pub fn params_with(&self, precision: Precision) -> Result<AmbiguityParams, CalibrationError> {
        let raw: Vec<f64> = self.categorical.iter().map(|c| c.delta_raw).collect();
        AmbiguityParams::new(
            self.numerical.iter().map(|w| w.gamma).collect(),
            round_weights(&raw, precision),
            self.epsilon,
            precision,
        )
    }

    pub fn perturbation_model(&self) -> PerturbationModel {
        PerturbationModel {
            rho_x: self.numerical.iter().map(|w| w.rho).collect(),
            u: self.numerical.iter().map(|w| w.u).collect(),
            b: self.numerical.iter().map(|w| w.b).collect(),
            rho_z: self.categorical.iter().map(|c| c.rho).collect(),
            cardinalities: self.categorical.iter().map(|c| c.cardinality).collect(),
        }
    }
}

fn rule_label<T: Serialize>(rule: &T) -> String {
    serde_json::to_string(rule).unwrap_or_default()
}

/// Calibrates the ambiguity set on a training set.
pub fn calibrate_on(cfg: &RunConfig, train: &EncodedDataset) -> Result<CalibrationOutput, CommandError> {
    let schema = &train.schema;
    let c = &cfg.certainty;
    let floors_x = vec![SAMPLED_RHO_MIN; schema.n()];
    let floors_z: Vec<f64> = schema.cardinalities().iter().map(|&k| 1.0 / k as f64).collect();
    let rho_x = resolve_certainty(&c.rho_x, &floors_x, cfg.seed, RHO_X_STREAM)?;
    let rho_z = resolve_certainty(&c.rho_z, &floors_z, cfg.seed, RHO_Z_STREAM)?;
    let u = match &c.u {
        HalfWidthRule::Values(v) if v.len() == schema.n() => v.clone(),
        HalfWidthRule::Values(v) => {
            return Err(ConfigError::Invalid(format!("u: expected {} values, got {}", schema.n(), v.len())).into())
        }
        HalfWidthRule::StddevFraction(f) => train.numerical_stddev().iter().map(|s| f * s).collect(),
    };
    let named = |feature: &str| {
        let feature = feature.to_string();
        move |source| CommandError::Calibration { feature, source }
    };

    let mut numerical = Vec::with_capacity(schema.n());
    for (j, name) in schema.numerical.iter().enumerate() {
        numerical.push(NumericalWeight {
            name: name.clone(),
            rho: rho_x[j],
            u: u[j],
            gamma: calibrate_gamma(rho_x[j], u[j]).map_err(named(name))?,
            b: laplace_scale(rho_x[j], u[j]).map_err(named(name))?,
        });
    }
    let mut warnings = Vec::new();
    let mut categorical = Vec::with_capacity(schema.m());
    for (l, feat) in schema.categorical.iter().enumerate() {
        let k = feat.cardinality();
        let raw = calibrate_delta(rho_z[l], k).map_err(named(&feat.name))?;
        let delta = round_weights(&[raw], c.precision)[0];
        if c.precision != Precision::None && raw < c.precision.step() / 2.0 {
            warnings.push(format!(
                "feature {:?}: delta {raw} rounds below the smallest weight and was clamped to {delta}",
                feat.name
            ));
        }
        categorical.push(CategoricalWeight {
            name: feat.name.clone(),
            cardinality: k,
            rho: rho_z[l],
            delta_raw: raw,
            delta,
        });
    }
    let epsilon = calibrate_epsilon(c.theta).map_err(named("theta"))?;
    let out = CalibrationOutput {
        schema_version: SCHEMA_VERSION,
        numerical,
        categorical,
        theta: c.theta,
        epsilon,
        precision: c.precision,
        warnings,
        provenance: Provenance {
            seed: cfg.seed,
            train_rows: train.len(),
            schema_fingerprint: schema.fingerprint(),
            rho_x_rule: rule_label(&c.rho_x),
            rho_z_rule: rule_label(&c.rho_z),
            u_rule: rule_label(&c.u),
            sampled_range: (SAMPLED_RHO_MIN, SAMPLED_RHO_MAX),
        },
    };
    // a zero weight survives only without rounding, and is not a metric weight
    if let Some(bad) = out.categorical.iter().find(|w| w.delta <= 0.0) {
        return Err(CommandError::Calibration {
            feature: bad.name.clone(),
            source: CalibrationError::Weight { name: "delta".into(), value: bad.delta },
        });
    }
    Ok(out)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrationOutput, CommandError> {
    let (train, _) = cfg.split()?;
    calibrate_on(cfg, &train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainOutput {
    pub schema_version: u32,
    pub model: ModelFile,
    pub params: AmbiguityParams,
    pub report: TrainReport,
    pub train_rows: usize,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput, CommandError> {
    let (train_set, _) = cfg.split()?;
    let cal = calibrate_on(cfg, &train_set)?;
    let params = cal.params().map_err(|source| CommandError::Calibration { feature: "delta".into(), source })?;
    let report = train(cfg.solver.route, &train_set, &params, &cfg.solver.options())?;
    Ok(TrainOutput {
        schema_version: SCHEMA_VERSION,
        model: ModelFile::new(&train_set.schema, report.coefficients.clone()),
        params,
        report,
        train_rows: train_set.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvaluateOutput {
    pub schema_version: u32,
    pub schema_fingerprint: String,
    pub test_rows: usize,
    pub reports: Vec<MetricReport>,
}

/// Scenario list with the expected shift first.
fn scenarios(cfg: &RunConfig) -> Vec<ShiftSpec> {
    let mut list = vec![ShiftSpec::None];
    list.extend(cfg.evaluation.scenarios.iter().copied().filter(|s| *s != ShiftSpec::None));
    list
}

/// Evaluates `model` (or a freshly trained one) on perturbed test sets.
pub fn cmd_evaluate(cfg: &RunConfig, model: Option<&ModelFile>) -> Result<EvaluateOutput, CommandError> {
    let (train_set, test) = cfg.split()?;
    let cal = calibrate_on(cfg, &train_set)?;
    let trained;
    let model = match model {
        Some(m) => m,
        None => {
            trained = cmd_train(cfg)?.model;
            &trained
        }
    };
    model.check_schema(&test.schema)?;
    let pm = cal.perturbation_model();
    let reports = scenarios(cfg)
        .into_iter()
        .map(|shift| {
            let run = PerturbationRun { sets: cfg.evaluation.sets, seed: cfg.seed, shift, bins: cfg.evaluation.bins };
            evaluate_under_shift(&model.coefficients, &test, &run, &pm)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluateOutput {
        schema_version: SCHEMA_VERSION,
        schema_fingerprint: test.schema.fingerprint(),
        test_rows: test.len(),
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PerturbedFile {
    pub scenario: String,
    pub index: usize,
    /// Path relative to the output directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PerturbOutput {
    pub schema_version: u32,
    pub seed: u64,
    pub models: Vec<(String, PerturbationModel)>,
    pub files: Vec<PerturbedFile>,
}

/// Writes the perturbed test sets that `evaluate` would score, one CSV per
/// set, under `out/perturbed/`.
pub fn cmd_perturb(cfg: &RunConfig, out: &Path) -> Result<PerturbOutput, CommandError> {
    let (train_set, test) = cfg.split()?;
    let pm = calibrate_on(cfg, &train_set)?.perturbation_model();
    check_model(&test, &pm)?;
    let mut models = Vec::new();
    let mut files = Vec::new();
    for (s, shift) in scenarios(cfg).into_iter().enumerate() {
        let model = shifted_model(&pm, shift, cfg.seed)?;
        let dir = out.join("perturbed").join(format!("scenario-{s}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for k in 0..cfg.evaluation.sets {
            let ds = perturbed_set(&test, &model, cfg.seed, k);
            let mut buf = Vec::new();
            ds.write_csv(&mut buf)?;
            let name = format!("set-{k:05}.csv");
            let path = dir.join(&name);
            std::fs::write(&path, &buf).map_err(io_err(&path))?;
            files.push(PerturbedFile {
                scenario: shift.label(),
                index: k,
                file: format!("perturbed/scenario-{s}/{name}"),
                sha256: Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        models.push((shift.label(), model));
    }
    Ok(PerturbOutput { schema_version: SCHEMA_VERSION, seed: cfg.seed, models, files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BenchRow {
    pub instance: u64,
    pub precision: Precision,
    pub route: Route,
    /// Cut mode of a cutting-plane row.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multi_cut: Option<bool>,
    pub seconds: f64,
    pub objective: f64,
    pub iterations: usize,
    pub status: TrainStatus,
    /// Relative objective difference to the first route on the same instance.
    pub relative_difference: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GraphSizeRow {
    pub instance: u64,
    pub precision: Precision,
    pub vertices: usize,
    pub arcs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BenchResult {
    pub schema_version: u32,
    pub routes: Vec<Route>,
    pub tolerance: f64,
    pub rows: Vec<BenchRow>,
    pub graph_sizes: Vec<GraphSizeRow>,
    /// Some pair of routes disagreed beyond the tolerance.
    pub disagreement: bool,
}

impl BenchResult {
    /// Plain-text table of the rows.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>11} {:>24} {:>10} {:>14} {:>6} {:>10}\n",
            "instance", "precision", "route", "seconds", "objective", "iters", "rel.diff"
        );
        for r in &self.rows {
            s += &format!(
                "{:>8} {:>11} {:>24} {:>10.4} {:>14.8} {:>6} {:>10.2e}{}\n",
                r.instance,
                format!("{:?}", r.precision),
                match r.multi_cut {
                    Some(true) => format!("{} (multi-cut)", r.route.as_str()),
                    _ => r.route.as_str().to_string(),
                },
                r.seconds,
                r.objective,
                r.iterations,
                r.relative_difference,
                if r.flagged { "  FLAGGED" } else { "" }
            );
        }
        for g in &self.graph_sizes {
            s += &format!("instance {} {:?}: |V| = {}, |A| = {}\n", g.instance, g.precision, g.vertices, g.arcs);
        }
        s
    }
}

/// Times every configured route on every instance and rounding regime.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchResult, CommandError> {
    let routes = &cfg.bench.routes;
    if routes.len() < 2 {
        return Err(ConfigError::Invalid("bench compares routes and needs at least two".into()).into());
    }
    let opts = cfg.solver.options();
    let mut rows = Vec::new();
    let mut graph_sizes = Vec::new();
    for rep in 0..cfg.bench.repeats as u64 {
        let instance = cfg.seed + rep;
        let ds = cfg.dataset_with_seed(instance)?;
        let (train_set, _) = crate::dataset::split(&ds, cfg.test_fraction, instance)?;
        let cal = calibrate_on(&RunConfig { seed: instance, ..cfg.clone() }, &train_set)?;
        for &precision in &cfg.bench.precisions {
            let params = cal
                .params_with(precision)
                .map_err(|source| CommandError::Calibration { feature: "delta".into(), source })?;
            let space = StateSpace::new(&params.delta, precision);
            let rows_z: Vec<&[usize]> = (0..train_set.len()).map(|i| train_set.categories_row(i)).collect();
            let (vertices, arcs) = GraphSet::build(&space, &train_set.schema.cardinalities(), &rows_z).total_size();
            graph_sizes.push(GraphSizeRow { instance, precision, vertices, arcs });
            let mut reference = None;
            let runs = routes.iter().flat_map(|&route| {
                let modes = match route {
                    Route::CuttingPlane if cfg.bench.both_cut_modes => vec![Some(false), Some(true)],
                    Route::CuttingPlane => vec![Some(opts.multi_cut)],
                    _ => vec![None],
                };
                modes.into_iter().map(move |m| (route, m))
            });
            for (route, multi_cut) in runs {
                let opts = TrainOptions { multi_cut: multi_cut.unwrap_or(opts.multi_cut), ..opts.clone() };
                let start = Instant::now();
                let rep = train(route, &train_set, &params, &opts)?;
                let seconds = start.elapsed().as_secs_f64();
                let base = *reference.get_or_insert(rep.objective);
                let rel = (rep.objective - base).abs() / base.abs().max(1e-12);
                rows.push(BenchRow {
                    instance,
                    precision,
                    route,
                    multi_cut,
                    seconds,
                    objective: rep.objective,
                    iterations: rep.iterations,
                    status: rep.status,
                    relative_difference: rel,
                    flagged: rel > cfg.bench.tolerance,
                });
            }
        }
    }
    let disagreement = rows.iter().any(|r| r.flagged);
    Ok(BenchResult {
        schema_version: SCHEMA_VERSION,
        routes: routes.clone(),
        tolerance: cfg.bench.tolerance,
        rows,
        graph_sizes,
        disagreement,
    })
}

/// JSON schemas of the config and of every command output, by name.
pub fn schemas() -> Vec<(&'static str, schemars::schema::RootSchema)> {
    vec![
        ("config", crate::config::config_schema()),
        ("calibrate", schemars::schema_for!(CalibrationOutput)),
        ("train", schemars::schema_for!(TrainOutput)),
        ("evaluate", schemars::schema_for!(EvaluateOutput)),
        ("bench", schemars::schema_for!(BenchResult)),
        ("perturb", schemars::schema_for!(PerturbOutput)),
    ]
}
