//! Full enumeration: one softplus constraint per datapoint and assignment.

use std::time::Instant;

use super::{
    check_inputs, finalize, single_solve_status, Formulation, Route, Separator, TrainError, TrainOptions, TrainReport,
};
use crate::calibration::AmbiguityParams;
use crate::dataset::EncodedDataset;
use crate::model::CategoryLayout;
use crate::separation::{check_cap, for_each_assignment};

/// Builds the enumerated program; refuses categorical spaces above `cap`.
pub fn assemble_monolithic(ds: &EncodedDataset, params: &AmbiguityParams, cap: u64) -> Result<Formulation, TrainError> {
    check_inputs(ds, params)?;
    let cards = ds.schema.cardinalities();
    let count = check_cap(&cards, cap)?;
    let total = count.saturating_mul(ds.len() as u64);
    if total > cap {
        return Err(crate::separation::SeparationError::CapExceeded { count: total, cap }.into());
    }
    let layout = CategoryLayout::new(&ds.schema);
    let mut f = Formulation::base(ds, params);
    for i in 0..ds.len() {
        for_each_assignment(&cards, |z| f.add_cut(ds, &layout, &params.delta, i, z));
    }
    Ok(f)
}

pub fn monolithic_train(
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    let f = assemble_monolithic(ds, params, opts.enumeration_cap)?;
    let backend = opts.backend();
    let sol = backend.solve(&f.program).map_err(|source| TrainError::Solver { route: Route::Monolithic, source })?;
    let (beta, lambda, r) = f.extract(&sol.x);
    let sep = Separator::new(ds, params);
    let (beta, lambda, r, objective, max_violation) = finalize(&sep, params, beta, lambda, r);
    let status = single_solve_status(ds, params, &beta, sol.reduced_accuracy);
    Ok(TrainReport {
        route: Route::Monolithic,
        backend: backend.name().to_string(),
        coefficients: beta,
        lambda,
        r,
        objective,
        iterations: sol.iterations as usize,
        constraints_generated: f.program.exp_cones.len() / 2,
        status,
        bounds: Vec::new(),
        gap: None,
        graph_size: None,
        max_violation,
        wall_time: start.elapsed(),
    })
}
