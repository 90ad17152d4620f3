//! Constraint generation: solve a relaxation over a working set of
//! `(i, z)` constraints, add the most violated one, repeat.

use std::collections::HashSet;
use std::time::Instant;

use super::{
    check_inputs, finalize, perfectly_separated, BoundPair, Formulation, Route, Separator, TrainError, TrainOptions,
    TrainReport, TrainStatus,
};
use crate::calibration::AmbiguityParams;
use crate::dataset::EncodedDataset;

pub fn cutting_plane_train(
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    check_inputs(ds, params)?;
    if !(opts.tol > 0.0) {
        return Err(TrainError::Options(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let backend = opts.backend();
    let sep = Separator::new(ds, params);

    // nominal constraints keep the first relaxation bounded
    let mut working: Vec<(usize, Vec<usize>)> = (0..ds.len()).map(|i| (i, ds.categories_row(i).to_vec())).collect();
    let mut seen: HashSet<(usize, Vec<usize>)> = working.iter().cloned().collect();

    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    let mut incumbent = None;
    let mut bounds = Vec::new();
    let mut iterations = 0;
    // a loosely solved master weakens the lower bound
    let mut reduced = false;
    let status = loop {
        if iterations > 0 && iterations >= opts.max_iter {
            break TrainStatus::IterationLimit;
        }
        if iterations > 0 && opts.time_limit.is_some_and(|limit| start.elapsed() >= limit) {
            break TrainStatus::TimeLimit;
        }
        iterations += 1;

        let mut f = Formulation::base(ds, params);
        for (i, z) in &working {
            f.add_cut(ds, &sep.layout, &params.delta, *i, z);
        }
        let sol =
            backend.solve(&f.program).map_err(|source| TrainError::Solver { route: Route::CuttingPlane, source })?;
        reduced |= sol.reduced_accuracy;
        let (beta, lambda, r) = f.extract(&sol.x);
        let relaxed = lambda * params.epsilon + r.iter().sum::<f64>() / r.len() as f64;

        let viol = sep.separate_all(&beta, lambda, &r);
        let repaired: f64 = viol.iter().map(|(v, _)| v.max(0.0)).sum::<f64>() / r.len() as f64;
        lower = lower.max(relaxed);
        if relaxed + repaired < upper {
            upper = relaxed + repaired;
            incumbent = Some((beta.clone(), lambda, r.clone()));
        }
        bounds.push(BoundPair { lower, upper });
        if upper - lower <= opts.tol {
            break TrainStatus::Optimal;
        }

        // candidates ordered by violation, ties by datapoint index
        let mut order: Vec<usize> = (0..viol.len()).filter(|&i| viol[i].0 > 0.0).collect();
        order.sort_by(|&a, &b| viol[b].0.total_cmp(&viol[a].0).then(a.cmp(&b)));
        let mut added = 0;
        for i in order {
            let key = (i, viol[i].1.clone());
            if seen.insert(key.clone()) {
                working.push(key);
                added += 1;
                if !opts.multi_cut {
                    break;
                }
            }
        }
        if added == 0 {
            // every violated constraint is already in the working set, so
            // what remains is backend round-off
            break TrainStatus::Optimal;
        }
    };

    let (beta, lambda, r) = incumbent.expect("at least one relaxation is solved");
    let (beta, lambda, r, objective, max_violation) = finalize(&sep, params, beta, lambda, r);
    let status = if status == TrainStatus::Optimal && perfectly_separated(ds, params, &beta) {
        TrainStatus::PerfectSeparation
    } else if status == TrainStatus::Optimal && reduced {
        TrainStatus::ReducedAccuracy
    } else {
        status
    };
    Ok(TrainReport {
        route: Route::CuttingPlane,
        backend: backend.name().to_string(),
        coefficients: beta,
        lambda,
        r,
        objective,
        iterations,
        constraints_generated: working.len() - ds.len(),
        status,
        bounds,
        gap: Some((upper - lower).max(0.0)),
        graph_size: None,
        max_violation,
        wall_time: start.elapsed(),
    })
}
