//! Training routes for the distributionally robust logistic model.
//!
//! All routes solve
//!
//! ```text
//! min  lambda * eps + (1/N) sum_i r_i
//! s.t. softplus(-y_i (beta_0 + beta_x . x_i + beta_z . z)) - lambda * D(z, z_i) <= r_i   for all i, z
//!      |beta_xj| <= gamma_j * lambda,  lambda >= 0
//! ```
//!
//! and differ in how the exponentially many constraints are handled.

pub mod barrier_backend;
pub mod clarabel_backend;
pub mod conic;
pub mod cutting_plane;
pub mod graph_train;
pub mod monolithic;
pub mod subgradient;

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{AmbiguityParams, CalibrationError};
use crate::dataset::EncodedDataset;
use crate::model::{categorical_distance, CategoryLayout, Coefficients};
use crate::separation::{dp_separation, SeparationError, StateSpace};

pub use barrier_backend::BarrierBackend;
pub use clarabel_backend::ClarabelBackend;
pub use conic::{AffineExpr, ConicBackend, ConicProgram, ConicSolution, Sense, SolveError};
pub use cutting_plane::cutting_plane_train;
pub use graph_train::{assemble_graph, graph_train};
pub use monolithic::{assemble_monolithic, monolithic_train};
pub use subgradient::{project_norm_epigraph, subgradient_train, SubgradientOptions};

/// Coefficient magnitude above which a fit is reported as separated.
pub const SEPARATION_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{route} route: {source}")]
    Solver { route: Route, source: SolveError },
    #[error(transparent)]
    Separation(#[from] SeparationError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid option: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Monolithic,
    CuttingPlane,
    Graph,
    Subgradient,
}

impl Route {
    pub const ALL: [Route; 4] = [Route::Monolithic, Route::CuttingPlane, Route::Graph, Route::Subgradient];

    pub fn as_str(self) -> &'static str {
        match self {
            Route::Monolithic => "monolithic",
            Route::CuttingPlane => "cutting-plane",
            Route::Graph => "graph",
            Route::Subgradient => "subgradient",
        }
    }
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Route::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown route `{s}` (expected monolithic, cutting-plane, graph or subgradient)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Clarabel,
    Barrier,
}

impl BackendKind {
    /// The backend with default settings, or with its iteration budget
    /// (interior-point or Newton steps) replaced by `iterations`.
    pub fn backend(self, iterations: Option<u32>) -> Box<dyn ConicBackend> {
        match self {
            BackendKind::Clarabel => {
                let mut b = ClarabelBackend::default();
                b.max_iter = iterations.unwrap_or(b.max_iter);
                Box::new(b)
            }
            BackendKind::Barrier => {
                let mut b = BarrierBackend::default();
                b.max_newton = iterations.map_or(b.max_newton, |n| n as usize);
                Box::new(b)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    Optimal,
    IterationLimit,
    TimeLimit,
    /// Fixed step budget of the first-order fallback used up.
    StepBudget,
    /// Zero radius and the data are linearly separated: the infimum is not attained.
    PerfectSeparation,
    /// The conic solver stalled before closing its duality gap; the returned
    /// point is feasible after repair but may be slightly suboptimal.
    ReducedAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct BoundPair {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct TrainReport {
    pub route: Route,
    pub backend: String,
    pub coefficients: Coefficients,
    pub lambda: f64,
    pub r: Vec<f64>,
    /// `lambda * eps + mean(r)`, recomputed from the returned values.
    pub objective: f64,
    pub iterations: usize,
    pub constraints_generated: usize,
    pub status: TrainStatus,
    /// Cutting-plane bound trajectory.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bounds: Vec<BoundPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gap: Option<f64>,
    /// Summed `(|V|, |A|)` over all datapoints' graphs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub graph_size: Option<(usize, usize)>,
    /// Largest separation value at the returned point before repair.
    pub max_violation: f64,
    /// Kept out of the JSON so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn recomputed_objective(&self, epsilon: f64) -> f64 {
        self.lambda * epsilon + self.r.iter().sum::<f64>() / self.r.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub backend: BackendKind,
    /// Absolute bound-gap tolerance of the cutting-plane loop.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration budget of each conic solve; the backend default when unset.
    pub backend_iterations: Option<u32>,
    /// Add a cut for every violated datapoint instead of only the worst.
    pub multi_cut: bool,
    pub time_limit: Option<Duration>,
    pub enumeration_cap: u64,
    pub subgradient: SubgradientOptions,
}

impl TrainOptions {
    pub fn backend(&self) -> Box<dyn ConicBackend> {
        self.backend.backend(self.backend_iterations)
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            backend: BackendKind::Clarabel,
            tol: 1e-7,
            max_iter: 100_000,
            backend_iterations: None,
            multi_cut: false,
            time_limit: None,
            enumeration_cap: crate::separation::DEFAULT_ENUMERATION_CAP,
            subgradient: SubgradientOptions::default(),
        }
    }
}

pub fn train(
    route: Route,
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    match route {
        Route::Monolithic => monolithic_train(ds, params, opts),
        Route::CuttingPlane => cutting_plane_train(ds, params, opts),
        Route::Graph => graph_train(ds, params, opts),
        Route::Subgradient => subgradient_train(ds, params, &opts.subgradient),
    }
}

/// Variable layout shared by the conic routes.
#[derive(Debug, Clone)]
pub struct Formulation {
    pub program: ConicProgram,
    pub lambda: usize,
    pub r0: usize,
    pub beta0: usize,
    pub n: usize,
    pub width: usize,
    pub num_points: usize,
}

impl Formulation {
    /// Objective, `lambda >= 0`, free `r` and `beta`, and the norm bounds.
    pub fn base(ds: &EncodedDataset, params: &AmbiguityParams) -> Self {
        let n = ds.schema.n();
        let width = ds.schema.encoded_width();
        let num = ds.len();
        let mut p = ConicProgram::new();
        let lambda = p.add_var("lambda", Some(0.0), None);
        let r0 = p.num_vars();
        for i in 0..num {
            p.add_var(format!("r[{i}]"), None, None);
        }
        let beta0 = p.add_var("beta_0", None, None);
        for j in 0..n {
            p.add_var(format!("beta_x[{j}]"), None, None);
        }
        for c in 0..width {
            p.add_var(format!("beta_z[{c}]"), None, None);
        }
        let mut obj = AffineExpr::constant(0.0).term(lambda, params.epsilon);
        for i in 0..num {
            obj = obj.term(r0 + i, 1.0 / num as f64);
        }
        p.objective = obj;
        for j in 0..n {
            p.add_abs_bound(beta0 + 1 + j, lambda, params.gamma[j]);
        }
        Self { program: p, lambda, r0, beta0, n, width, num_points: num }
    }

    /// `beta_0 + beta_x . x_i`.
    pub fn numeric_score(&self, ds: &EncodedDataset, i: usize) -> AffineExpr {
        let mut e = AffineExpr::var(self.beta0);
        for (j, &v) in ds.x_row(i).iter().enumerate() {
            e = e.term(self.beta0 + 1 + j, v);
        }
        e
    }

    /// `softplus(-y (score(z))) <= r_i + lambda D(z, z_i)`.
    pub fn add_cut(&mut self, ds: &EncodedDataset, layout: &CategoryLayout, delta: &[f64], i: usize, z: &[usize]) {
        let y = ds.label(i);
        let mut score = self.numeric_score(ds, i);
        for (l, &k) in z.iter().enumerate() {
            if let Some(col) = layout.column(l, k) {
                score = score.term(self.beta0 + 1 + self.n + col, 1.0);
            }
        }
        let d = categorical_distance(delta, z, ds.categories_row(i));
        let rhs = AffineExpr::var(self.r0 + i).term(self.lambda, d);
        self.program.add_softplus_le(score.scaled(-y), rhs);
    }

    pub fn extract(&self, x: &[f64]) -> (Coefficients, f64, Vec<f64>) {
        let beta = Coefficients::from_slice(&x[self.beta0..self.beta0 + 1 + self.n + self.width], self.n);
        let r = x[self.r0..self.r0 + self.num_points].to_vec();
        (beta, x[self.lambda].max(0.0), r)
    }
}

/// Shared data for separation passes.
pub struct Separator<'a> {
    pub ds: &'a EncodedDataset,
    pub layout: CategoryLayout,
    pub space: StateSpace,
}

impl<'a> Separator<'a> {
    pub fn new(ds: &'a EncodedDataset, params: &AmbiguityParams) -> Self {
        Self { ds, layout: CategoryLayout::new(&ds.schema), space: StateSpace::new(&params.delta, params.precision) }
    }

    /// Per-datapoint violations and witnesses, in datapoint order.
    pub fn separate_all(&self, beta: &Coefficients, lambda: f64, r: &[f64]) -> Vec<(f64, Vec<usize>)> {
        (0..self.ds.len())
            .into_par_iter()
            .map(|i| {
                let point = crate::model::Point {
                    x: self.ds.x_row(i),
                    categories: self.ds.categories_row(i),
                    y: self.ds.label(i),
                };
                let s = dp_separation(&self.space, &self.layout, beta, lambda, r[i], point);
                (s.violation, s.witness)
            })
            .collect()
    }
}

/// Makes `(beta, lambda, r)` exactly feasible by raising each `r_i` by its
/// remaining violation, then fills in the report fields that depend on it.
pub(crate) fn finalize(
    sep: &Separator<'_>,
    params: &AmbiguityParams,
    beta: Coefficients,
    lambda: f64,
    mut r: Vec<f64>,
) -> (Coefficients, f64, Vec<f64>, f64, f64) {
    let viol = sep.separate_all(&beta, lambda, &r);
    let mut worst = f64::NEG_INFINITY;
    for (ri, (v, _)) in r.iter_mut().zip(&viol) {
        worst = worst.max(*v);
        if *v > 0.0 {
            *ri += v;
        }
    }
    let objective = lambda * params.epsilon + r.iter().sum::<f64>() / r.len().max(1) as f64;
    (beta, lambda, r, objective, worst)
}

/// Zero radius with every training point on the right side of the
/// boundary, or coefficients past the threshold.
/// Status of a one-shot conic solve.
pub(crate) fn single_solve_status(
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    beta: &Coefficients,
    reduced: bool,
) -> TrainStatus {
    if perfectly_separated(ds, params, beta) {
        TrainStatus::PerfectSeparation
    } else if reduced {
        TrainStatus::ReducedAccuracy
    } else {
        TrainStatus::Optimal
    }
}

pub(crate) fn perfectly_separated(ds: &EncodedDataset, params: &AmbiguityParams, beta: &Coefficients) -> bool {
    if beta.max_abs() > SEPARATION_THRESHOLD {
        return true;
    }
    if params.epsilon > 0.0 || ds.is_empty() {
        return false;
    }
    let layout = CategoryLayout::new(&ds.schema);
    (0..ds.len()).all(|i| ds.label(i) * beta.score_categories(&layout, ds.x_row(i), ds.categories_row(i)) > 0.0)
}

pub(crate) fn check_inputs(ds: &EncodedDataset, params: &AmbiguityParams) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    params.check_dims(ds.schema.n(), ds.schema.m())?;
    Ok(())
}
