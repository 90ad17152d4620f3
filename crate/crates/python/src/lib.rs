//! Python bindings: datasets, ambiguity parameters, training routes,
//! prediction, and the JSON-config commands.
//!
//! Structured results (reports, calibration, metrics) cross the boundary as
//! plain dicts decoded from their JSON form.

use std::collections::HashMap;

use mixdro_core::calibration::{self, AmbiguityParams, Precision};
use mixdro_core::commands;
use mixdro_core::config::RunConfig;
use mixdro_core::dataset::{self, ColumnKind, CsvOptions, EncodedDataset};
use mixdro_core::eval::predict_all;
use mixdro_core::model::{Coefficients, ModelFile};
use mixdro_core::solve::{self, Route, TrainOptions, TrainReport};
use mixdro_core::synthetic::{generate, SyntheticSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: DeserializeOwned>(name: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{name}: {e}")))
}

fn parse_enum<T: DeserializeOwned>(kind: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {kind} {s:?}")))
}

/// Command failures map to ValueError for bad input and RuntimeError when a
/// solver gives up.
fn command_err(e: commands::CommandError) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Encoded dataset: numerical matrix, categorical indices, labels in {-1, 1}.
#[pyclass(name = "Dataset", module = "mixdro", frozen)]
struct PyDataset {
    inner: EncodedDataset,
}

#[pymethods]
impl PyDataset {
    /// Logistic-model data with uniformly drawn categories.
    #[staticmethod]
    #[pyo3(signature = (points, numerical, cardinalities, seed = 0, coef_scale = 1.0))]
    fn synthetic(points: usize, numerical: usize, cardinalities: Vec<usize>, seed: u64, coef_scale: f64) -> Self {
        let (inner, _) = generate(&SyntheticSpec { points, numerical, cardinalities, coef_scale, seed });
        Self { inner }
    }

    /// Loads, cleans and encodes a CSV file. `columns` maps every kept column
    /// to "numerical" or "categorical".
    #[staticmethod]
    #[pyo3(signature = (path, label, columns, drop = Vec::new()))]
    fn from_csv(path: &str, label: &str, columns: HashMap<String, String>, drop: Vec<String>) -> PyResult<Self> {
        let kinds = columns
            .iter()
            .map(|(k, v)| Ok((k.clone(), parse_enum::<ColumnKind>("column kind", v)?)))
            .collect::<PyResult<HashMap<_, _>>>()?;
        let opts = CsvOptions { drop_columns: drop, ..CsvOptions::default() };
        let raw = dataset::load_csv(path, label, &kinds, &opts).map_err(value_err)?;
        let inner = dataset::encode(&dataset::preprocess(&raw).map_err(value_err)?).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// `(train, test)` with `floor(len * test_fraction)` test rows.
    #[pyo3(signature = (test_fraction, seed = 0))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = dataset::split(&self.inner, test_fraction, seed).map_err(value_err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn numerical(&self) -> Vec<String> {
        self.inner.schema.numerical.clone()
    }

    #[getter]
    fn cardinalities(&self) -> Vec<usize> {
        self.inner.schema.cardinalities()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.inner.labels().to_vec()
    }

    fn numerical_stddev(&self) -> Vec<f64> {
        self.inner.numerical_stddev()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(rows={}, numerical={}, cardinalities={:?})",
            self.inner.len(),
            self.inner.schema.n(),
            self.inner.schema.cardinalities()
        )
    }
}

/// Ambiguity set: norm weights `gamma`, categorical weights `delta`, radius.
#[pyclass(name = "AmbiguityParams", module = "mixdro", frozen)]
struct PyParams {
    inner: AmbiguityParams,
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (gamma, delta, epsilon, precision = "integer"))]
    fn new(gamma: Vec<f64>, delta: Vec<f64>, epsilon: f64, precision: &str) -> PyResult<Self> {
        let precision: Precision = parse_enum("precision", precision)?;
        let inner = AmbiguityParams::new(gamma, delta, epsilon, precision).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma.clone()
    }

    #[getter]
    fn delta(&self) -> Vec<f64> {
        self.inner.delta.clone()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    fn __repr__(&self) -> String {
        format!(
            "AmbiguityParams(gamma={:?}, delta={:?}, epsilon={})",
            self.inner.gamma, self.inner.delta, self.inner.epsilon
        )
    }
}

/// Fitted coefficients plus the report of the run that produced them.
#[pyclass(name = "TrainResult", module = "mixdro", frozen)]
struct PyTrainResult {
    report: TrainReport,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn objective(&self) -> f64 {
        self.report.objective
    }

    #[getter]
    fn radius_multiplier(&self) -> f64 {
        self.report.lambda
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.report.coefficients.intercept
    }

    #[getter]
    fn beta_x(&self) -> Vec<f64> {
        self.report.coefficients.beta_x.clone()
    }

    #[getter]
    fn beta_z(&self) -> Vec<f64> {
        self.report.coefficients.beta_z.clone()
    }

    #[getter]
    fn status(&self) -> String {
        serde_json::to_value(self.report.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    #[getter]
    fn seconds(&self) -> f64 {
        self.report.wall_time.as_secs_f64()
    }

    /// Probability of the positive label for every row of `data`.
    fn predict_proba(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        self.report.coefficients.validate(&data.inner.schema).map_err(value_err)?;
        Ok(predict_all(&self.report.coefficients, &data.inner))
    }

    /// Model file (coefficients bound to the schema of `data`) as JSON.
    fn model_json(&self, data: &PyDataset) -> PyResult<String> {
        let model = ModelFile::new(&data.inner.schema, self.report.coefficients.clone());
        serde_json::to_string_pretty(&model).map_err(value_err)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.report)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainResult(route={}, objective={:.8}, status={})",
            self.report.route,
            self.report.objective,
            self.status()
        )
    }
}

/// Trains on `data` by `route`: "graph", "cutting-plane", "monolithic" or
/// "subgradient". The solve runs with the interpreter detached.
#[pyfunction]
#[pyo3(signature = (data, params, route = "graph", multi_cut = false, time_limit_secs = None))]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    params: &PyParams,
    route: &str,
    multi_cut: bool,
    time_limit_secs: Option<f64>,
) -> PyResult<PyTrainResult> {
    let route: Route = parse_enum("route", route)?;
    let opts = TrainOptions {
        multi_cut,
        time_limit: time_limit_secs.map(std::time::Duration::from_secs_f64),
        ..TrainOptions::default()
    };
    let report = py.detach(|| solve::train(route, &data.inner, &params.inner, &opts)).map_err(|e| match e {
        solve::TrainError::Solver { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    })?;
    Ok(PyTrainResult { report })
}

/// Probability of the positive label under a model file produced by `train`.
#[pyfunction]
fn predict_proba(model_json: &str, data: &PyDataset) -> PyResult<Vec<f64>> {
    let model: ModelFile = from_json("model", model_json)?;
    model.check_schema(&data.inner.schema).map_err(value_err)?;
    Ok(predict_all(&model.coefficients, &data.inner))
}

#[pyfunction]
fn calibrate_gamma(rho: f64, half_width: f64) -> PyResult<f64> {
    calibration::calibrate_gamma(rho, half_width).map_err(value_err)
}

#[pyfunction]
fn calibrate_delta(rho: f64, cardinality: usize) -> PyResult<f64> {
    calibration::calibrate_delta(rho, cardinality).map_err(value_err)
}

#[pyfunction]
fn calibrate_epsilon(theta: f64) -> PyResult<f64> {
    calibration::calibrate_epsilon(theta).map_err(value_err)
}

fn config(text: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(text, None).map_err(value_err)
}

/// Runs `calibrate` on a JSON run config and returns the result as a dict.
#[pyfunction]
fn run_calibrate<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let out = py.detach(|| commands::cmd_calibrate(&cfg)).map_err(command_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn run_train<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let out = py.detach(|| commands::cmd_train(&cfg)).map_err(command_err)?;
    to_py(py, &out)
}

/// Evaluates a model file (or a freshly trained model) on perturbed test sets.
#[pyfunction]
#[pyo3(signature = (config_json, model_json = None))]
fn run_evaluate<'py>(py: Python<'py>, config_json: &str, model_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let model: Option<ModelFile> = model_json.map(|m| from_json("model", m)).transpose()?;
    let out = py.detach(|| commands::cmd_evaluate(&cfg, model.as_ref())).map_err(command_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn run_bench<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let out = py.detach(|| commands::cmd_bench(&cfg)).map_err(command_err)?;
    to_py(py, &out)
}

/// Coefficients from a flat `[intercept, beta_x..., beta_z...]` vector.
#[pyfunction]
fn model_from_vector(data: &PyDataset, values: Vec<f64>) -> PyResult<String> {
    let schema = &data.inner.schema;
    if values.len() != 1 + schema.n() + schema.encoded_width() {
        return Err(PyValueError::new_err(format!(
            "expected {} values, got {}",
            1 + schema.n() + schema.encoded_width(),
            values.len()
        )));
    }
    let model = ModelFile::new(schema, Coefficients::from_slice(&values, schema.n()));
    serde_json::to_string_pretty(&model).map_err(value_err)
}

#[pymodule]
fn mixdro(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict_proba, m)?)?;
    m.add_function(wrap_pyfunction!(model_from_vector, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_delta, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(run_calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(run_train, m)?)?;
    m.add_function(wrap_pyfunction!(run_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
