//! Compact reformulation through the longest-path dual of each datapoint's
//! separation graph.
//!
//! Each arc `(s, t)` gives `mu_t - mu_s >= w`. Category arcs are linear in
//! `beta_z`; a sink arc from `(m, d)` is rewritten as
//! `log(1 + exp(mu_(m,d) - mu_sink)) <= r_i + lambda d` and goes through the
//! same softplus encoding as the other routes. The source potential is fixed
//! at zero.
//!
//! Datapoints with the same categorical pattern and label have identical
//! graphs, so they share one set of potentials; only the sink differs.

use std::collections::HashMap;
use std::time::Instant;

use super::{
    check_inputs, finalize, single_solve_status, AffineExpr, Formulation, Route, Sense, Separator, TrainError,
    TrainOptions, TrainReport,
};
use crate::calibration::AmbiguityParams;
use crate::dataset::EncodedDataset;
use crate::graph::GraphSet;

/// Assembled program plus the graph sizes it was built from.
pub struct GraphProgram {
    pub formulation: Formulation,
    pub graphs: GraphSet,
    /// Potentials and arc rows emitted after sharing identical graphs.
    pub shared_size: (usize, usize),
}

pub fn assemble_graph(ds: &EncodedDataset, params: &AmbiguityParams) -> Result<GraphProgram, TrainError> {
    check_inputs(ds, params)?;
    let sep = Separator::new(ds, params);
    let rows: Vec<&[usize]> = (0..ds.len()).map(|i| ds.categories_row(i)).collect();
    let graphs = GraphSet::build(&sep.space, &sep.layout.cardinalities, &rows);
    let space = &sep.space;
    let layout = &sep.layout;
    let m = space.m();

    let mut f = Formulation::base(ds, params);
    let beta_z0 = f.beta0 + 1 + f.n;
    // weight of the arc that sets feature l to category c: -y beta_z[l][c]
    let weight = |l: usize, c: usize, y: f64| -> AffineExpr {
        match layout.column(l, c) {
            Some(col) => AffineExpr::constant(0.0).term(beta_z0 + col, -y),
            None => AffineExpr::constant(0.0),
        }
    };

    // first potential of each layer, keyed by (label, pattern)
    let mut layers: HashMap<(bool, Vec<usize>), Vec<usize>> = HashMap::new();
    let mut potentials = 0;
    let mut arc_rows = 0;
    for i in 0..ds.len() {
        let z = ds.categories_row(i);
        let y = ds.label(i);
        let key = (y > 0.0, z.to_vec());
        if !layers.contains_key(&key) {
            let mut firsts = Vec::with_capacity(m);
            for k in 1..=m {
                let first = f.program.num_vars();
                for s in 0..space.layer(k).len() {
                    f.program.add_var(format!("mu[{i}:{k}:{s}]"), None, None);
                }
                potentials += space.layer(k).len();
                let l = k - 1;
                let stay = z[l];
                let unit = space.unit_weight(l);
                for (p, &state) in space.layer(l).iter().enumerate() {
                    let tail = if k == 1 { AffineExpr::constant(0.0) } else { AffineExpr::var(firsts[k - 2] + p) };
                    let same = space.index_of(k, state).expect("successor state exists");
                    let moved = space.index_of(k, state + unit).expect("successor state exists");
                    f.program
                        .add_linear(AffineExpr::var(first + same).minus(&tail).minus(&weight(l, stay, y)), Sense::Ge);
                    arc_rows += 1;
                    for c in (0..layout.cardinalities[l]).filter(|&c| c != stay) {
                        f.program
                            .add_linear(AffineExpr::var(first + moved).minus(&tail).minus(&weight(l, c, y)), Sense::Ge);
                        arc_rows += 1;
                    }
                }
                firsts.push(first);
            }
            layers.insert(key.clone(), firsts);
        }

        let last = layers[&key].last().copied();
        let sink = f.program.add_var(format!("mu_sink[{i}]"), None, None);
        for (s, &d) in space.layer_distances(m).iter().enumerate() {
            let tail = last.map_or_else(|| AffineExpr::constant(0.0), |t| AffineExpr::var(t + s));
            let a = AffineExpr::var(f.r0 + i).term(f.lambda, d);
            f.program.add_softplus_le(tail.term(sink, -1.0), a);
        }
        let coupling = f.numeric_score(ds, i).scaled(y).term(sink, -1.0);
        f.program.add_linear(coupling, Sense::Ge);
    }
    Ok(GraphProgram { formulation: f, graphs, shared_size: (potentials, arc_rows) })
}

pub fn graph_train(
    ds: &EncodedDataset,
    params: &AmbiguityParams,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    let gp = assemble_graph(ds, params)?;
    let backend = opts.backend();
    let sol =
        backend.solve(&gp.formulation.program).map_err(|source| TrainError::Solver { route: Route::Graph, source })?;
    let (beta, lambda, r) = gp.formulation.extract(&sol.x);
    let sep = Separator::new(ds, params);
    let (beta, lambda, r, objective, max_violation) = finalize(&sep, params, beta, lambda, r);
    let status = single_solve_status(ds, params, &beta, sol.reduced_accuracy);
    Ok(TrainReport {
        route: Route::Graph,
        backend: backend.name().to_string(),
        coefficients: beta,
        lambda,
        r,
        objective,
        iterations: sol.iterations as usize,
        constraints_generated: gp.formulation.program.linear.len() + gp.formulation.program.exp_cones.len(),
        status,
        bounds: Vec::new(),
        gap: None,
        graph_size: Some(gp.graphs.total_size()),
        max_violation,
        wall_time: start.elapsed(),
    })
}
