//! Projected subgradient fallback that needs no conic solver.
//!
//! Eliminating `r` leaves `F(lambda, beta) = lambda eps + mean_i g_i(lambda, beta)`
//! with `g_i = max_z [softplus(-y s(z)) - lambda D(z, z_i)]`, evaluated by the
//! separation DP. Iterates are projected onto `|beta_xj| <= gamma_j lambda`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_inputs, perfectly_separated, Route, Separator, TrainError, TrainReport, TrainStatus};
use crate::calibration::AmbiguityParams;
use crate::dataset::EncodedDataset;
use crate::model::{sigmoid, Coefficients, Point};
use crate::separation::dp_separation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SubgradientOptions {
    pub steps: usize,
    /// Steps spent on each candidate scale when picking `c` in `c / sqrt(t)`.
    pub tune_steps: usize,
    pub step_scales: Vec<f64>,
}

impl Default for SubgradientOptions {
    fn default() -> Self {
        Self { steps: 5000, tune_steps: 50, step_scales: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0] }
    }
}

/// Euclidean projection of `(t, v)` onto `{(lambda, b): |b_j| <= gamma_j lambda}`.
///
/// For a fixed `lambda` the best `b` clips `v`; the remaining one-dimensional
/// problem is piecewise quadratic with breakpoints `|v_j| / gamma_j`, and on
/// the piece whose clipped set is `A` its minimizer is
/// `(t + sum_A gamma_j |v_j|) / (1 + sum_A gamma_j^2)`.
pub fn project_norm_epigraph(t: f64, v: &[f64], gamma: &[f64]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    let ratio = |j: usize| v[j].abs() / gamma[j];
    order.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)));
    let mut num = t;
    let mut den = 1.0;
    let mut lambda = t;
    for k in 0..=order.len() {
        // clipped set = first k entries; valid if lambda lands between breakpoints
        lambda = num / den;
        let hi = if k == 0 { f64::INFINITY } else { ratio(order[k - 1]) };
        let lo = if k == order.len() { f64::NEG_INFINITY } else { ratio(order[k]) };
        if lambda >= lo && lambda <= hi {
            break;
        }
        if k < order.len() {
            let j = order[k];
            num += gamma[j] * v[j].abs();
            den += gamma[j] * gamma[j];
        }
    }
    let lambda = lambda.max(0.0);
    let b = v.iter().zip(gamma).map(|(&x, &g)| x.clamp(-g * lambda, g * lambda)).collect();
    (lambda, b)
}

struct Eval {
    value: f64,
    g_lambda: f64,
    g_beta: Vec<f64>,
    per_point: Vec<f64>,
}

fn evaluate(sep: &Separator<'_>, params: &AmbiguityParams, lambda: f64, beta: &Coefficients) -> Eval {
    let ds = sep.ds;
    let n = ds.schema.n();
    let parts: Vec<(f64, f64, f64, Vec<usize>)> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let point = Point { x: ds.x_row(i), categories: ds.categories_row(i), y: ds.label(i) };
            let s = dp_separation(&sep.space, &sep.layout, beta, lambda, 0.0, point);
            let score = beta.score_categories(&sep.layout, point.x, &s.witness);
            (s.violation, s.witness_distance, sigmoid(-point.y * score), s.witness)
        })
        .collect();
    let num = ds.len() as f64;
    let mut g_beta = vec![0.0; 1 + n + sep.layout.width()];
    let mut value = 0.0;
    let mut mean_d = 0.0;
    let mut per_point = Vec::with_capacity(parts.len());
    for (i, (v, d, sig, z)) in parts.into_iter().enumerate() {
        value += v;
        mean_d += d;
        per_point.push(v);
        let w = -ds.label(i) * sig / num;
        g_beta[0] += w;
        for (j, &x) in ds.x_row(i).iter().enumerate() {
            g_beta[1 + j] += w * x;
        }
        for (l, &k) in z.iter().enumerate() {
            if let Some(col) = sep.layout.column(l, k) {
                g_beta[1 + n + col] += w;
            }
        }
    }
    Eval { value: lambda * params.epsilon + value / num, g_lambda: params.epsilon - mean_d / num, g_beta, per_point }
}

struct Best {
    value: f64,
    lambda: f64,
    beta: Coefficients,
}

fn run(sep: &Separator<'_>, params: &AmbiguityParams, scale: f64, steps: usize, best: &mut Best) {
    let n = sep.ds.schema.n();
    let mut lambda = 1.0;
    let mut beta = Coefficients::zeros(n, sep.layout.width());
    for t in 1..=steps {
        let e = evaluate(sep, params, lambda, &beta);
        if e.value < best.value {
            *best = Best { value: e.value, lambda, beta: beta.clone() };
        }
        let step = scale / (t as f64).sqrt();
        let mut flat = beta.to_vec();
        for (b, g) in flat.iter_mut().zip(&e.g_beta) {
            *b -= step * g;
        }
        let (l, bx) = project_norm_epigraph(lambda - step * e.g_lambda, &flat[1..1 + n], &params.gamma);
        flat[1..1 + n].copy_from_slice(&bx);
        lambda = l;
        beta = Coefficients::from_slice(&flat, n);
    }
}

pub fn subgradient_train(
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    opts: &SubgradientOptions,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    check_inputs(ds, params)?;
    if opts.step_scales.is_empty() || opts.step_scales.iter().any(|&c| !(c > 0.0)) {
        return Err(TrainError::Options("step scales must be a non-empty list of positive numbers".into()));
    }
    let sep = Separator::new(ds, params);
    let start_beta = Coefficients::zeros(ds.schema.n(), sep.layout.width());
    let mut best = Best { value: f64::INFINITY, lambda: 1.0, beta: start_beta };

    let mut scale = opts.step_scales[0];
    if opts.step_scales.len() > 1 {
        let mut best_trial = f64::INFINITY;
        for &c in &opts.step_scales {
            let mut trial = Best { value: f64::INFINITY, lambda: 1.0, beta: best.beta.clone() };
            run(&sep, params, c, opts.tune_steps, &mut trial);
            if trial.value < best_trial {
                best_trial = trial.value;
                scale = c;
            }
            if trial.value < best.value {
                best = trial;
            }
        }
    }
    run(&sep, params, scale, opts.steps, &mut best);

    let e = evaluate(&sep, params, best.lambda, &best.beta);
    let status = if perfectly_separated(ds, params, &best.beta) {
        TrainStatus::PerfectSeparation
    } else {
        TrainStatus::StepBudget
    };
    let r = e.per_point;
    let objective = best.lambda * params.epsilon + r.iter().sum::<f64>() / r.len() as f64;
    Ok(TrainReport {
        route: Route::Subgradient,
        backend: "none".to_string(),
        coefficients: best.beta,
        lambda: best.lambda,
        r,
        objective,
        iterations: opts.steps + opts.tune_steps * opts.step_scales.len(),
        constraints_generated: 0,
        status,
        bounds: Vec::new(),
        gap: None,
        graph_size: None,
        max_violation: 0.0,
        wall_time: start.elapsed(),
    })
}
