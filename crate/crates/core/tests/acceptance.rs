//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line
//! (written past the test harness capture) before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::{certificate, erm_fit, fixtures, oracle_case, relative_gap};
use mixdro::calibration::{
    calibrate_delta, calibrate_epsilon, calibrate_gamma, laplace_scale, PerturbationModel, Precision,
};
use mixdro::commands::{calibrate_on, cmd_evaluate, cmd_train};
use mixdro::config::RunConfig;
use mixdro::dataset::EncodedDataset;
use mixdro::graph::{neg_log_expm1, GraphSet, SeparationGraph};
use mixdro::model::categorical_distance;
use mixdro::separation::{
    brute_force_separation, dp_separation, for_each_assignment, separation_objective, StateSpace,
    DEFAULT_ENUMERATION_CAP,
};
use mixdro::solve::{train, Route, TrainOptions, TrainStatus};
use mixdro::synthetic::{generate, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

const ORACLE_INSTANCES: usize = 200;
const ORACLE_TOL: f64 = 1e-9;

#[test]
fn criterion_1_separation_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut witness_ok = true;
    for k in 0..ORACLE_INSTANCES {
        let c = oracle_case(&mut rng, k);
        let layout = c.layout();
        let space = StateSpace::new(&c.delta, c.precision);
        let dp = dp_separation(&space, &layout, &c.beta, c.lambda, c.r, c.point());
        let bf = brute_force_separation(&layout, &c.delta, &c.beta, c.lambda, c.r, c.point(), DEFAULT_ENUMERATION_CAP)
            .unwrap();
        worst = worst.max((dp.violation - bf.violation).abs());
        let replay = separation_objective(&layout, &c.delta, &c.beta, c.lambda, c.r, c.point(), &dp.witness);
        witness_ok &= (replay - dp.violation).abs() <= ORACLE_TOL;
    }
    let elapsed = start.elapsed();
    let pass = worst <= ORACLE_TOL && witness_ok && elapsed < Duration::from_secs(5);
    verdict(1, pass, &format!("max |dp - brute| = {worst:.2e}, witnesses replay: {witness_ok}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_2_longest_path_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut paths_ok = true;
    for k in 0..ORACLE_INSTANCES {
        let c = oracle_case(&mut rng, k);
        let layout = c.layout();
        let space = StateSpace::new(&c.delta, c.precision);
        let g = SeparationGraph::build(&space, &c.cards, &c.categories);
        let lp = g.longest_path(&layout, &c.beta, c.y, c.lambda, c.r);
        let mut best = f64::NEG_INFINITY;
        for_each_assignment(&c.cards, |z| {
            let cat: f64 = z.iter().enumerate().map(|(l, &kk)| c.beta.category_weight(&layout, l, kk)).sum();
            let d = categorical_distance(&c.delta, z, &c.categories);
            best = best.max(-c.y * cat + neg_log_expm1(c.r + c.lambda * d));
        });
        // both sides are +inf when a sink arc leaves its domain
        let diff = if lp.value.is_infinite() && lp.value == best { 0.0 } else { (lp.value - best).abs() };
        worst = worst.max(diff);

        let total: usize = c.cards.iter().product();
        let paths = g.enumerate_paths();
        let decoded: std::collections::BTreeSet<Vec<usize>> = paths.iter().map(|p| g.decode_path(p)).collect();
        paths_ok &= paths.len() == total && decoded.len() == total;
    }
    let pass = worst <= ORACLE_TOL && paths_ok;
    verdict(2, pass, &format!("max |longest path - brute| = {worst:.2e}, paths decode to distinct z: {paths_ok}"));
    assert!(pass);
}

#[test]
fn criterion_3_routes_agree() {
    let start = Instant::now();
    let opts = TrainOptions::default();
    let fx = fixtures(12, 11);
    let mut worst_gap = 0.0f64;
    let mut worst_cert = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for f in &fx {
        let mut objectives = Vec::new();
        for route in [Route::Monolithic, Route::CuttingPlane, Route::Graph] {
            match train(route, &f.ds, &f.params, &opts) {
                Ok(rep) => {
                    worst_cert = worst_cert.max(certificate(&f.ds, &f.params, &rep.coefficients, rep.lambda, &rep.r));
                    objectives.push(rep.objective);
                }
                Err(e) => failures.push(format!("{} {route}: {e}", f.name)),
            }
        }
        for o in &objectives {
            worst_gap = worst_gap.max(relative_gap(*o, objectives[0]));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && worst_gap <= 1e-4 && worst_cert <= 1e-6 && elapsed < Duration::from_secs(300);
    verdict(
        3,
        pass,
        &format!(
            "{} fixtures, max relative gap {worst_gap:.2e}, max violation {worst_cert:.2e}, {elapsed:.2?}, failures {failures:?}",
            fx.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_degenerate_radii() {
    let opts = TrainOptions::default();
    let fx = fixtures(6, 21);
    let mut erm_gap = 0.0f64;
    let mut beta_x_max = 0.0f64;
    let mut monotone = true;
    for f in &fx {
        let (_, erm_loss) = erm_fit(&f.ds);
        let zero = train(Route::Graph, &f.ds, &f.params.with_epsilon(0.0), &opts).unwrap();
        erm_gap = erm_gap.max((zero.objective - erm_loss).abs());

        let huge = train(Route::Graph, &f.ds, &f.params.with_epsilon(100.0), &opts).unwrap();
        beta_x_max = huge.coefficients.beta_x.iter().fold(beta_x_max, |m, b| m.max(b.abs()));

        let mut prev = f64::NEG_INFINITY;
        for eps in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let rep = train(Route::Graph, &f.ds, &f.params.with_epsilon(eps), &opts).unwrap();
            // solver accuracy slack only
            monotone &= rep.objective >= prev - 1e-7;
            prev = rep.objective;
        }
    }
    let pass = erm_gap <= 1e-5 && beta_x_max <= 1e-4 && monotone;
    verdict(
        4,
        pass,
        &format!("max |loss - ERM| = {erm_gap:.2e}, max |beta_x| at eps=100: {beta_x_max:.2e}, monotone: {monotone}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_closed_forms() {
    let tol = 1e-12;
    let mut errors = vec![(calibrate_gamma(1.0 - (-1.0f64).exp(), 1.0).unwrap() - 1.0).abs()];
    for k in 2..=6 {
        errors.push(calibrate_delta(1.0 / k as f64, k).unwrap().abs());
    }
    errors.push(calibrate_epsilon(1.0).unwrap().abs());
    for (rho, u) in [(0.3, 0.5), (0.6, 1.0), (0.9, 2.5)] {
        errors.push((laplace_scale(rho, u).unwrap() * calibrate_gamma(rho, u).unwrap() - 1.0).abs());
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let pass = worst <= tol;
    verdict(5, pass, &format!("max error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_6_perturbation_statistics() {
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sigma = 0.0f64;
    for p in 0..5u64 {
        let cards: Vec<usize> = (0..3).map(|_| rng.random_range(2..=6)).collect();
        let (ds, _) = generate(&SyntheticSpec {
            points: DRAWS,
            numerical: 2,
            cardinalities: cards.clone(),
            coef_scale: 1.0,
            seed: p,
        });
        let rho_x: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..0.95)).collect();
        let u: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..3.0)).collect();
        let rho_z: Vec<f64> = cards.iter().map(|&k| rng.random_range(1.0 / k as f64..0.95)).collect();
        let pm = PerturbationModel::from_certainty(&rho_x, &u, &rho_z, &cards).unwrap();
        let shifted = mixdro::eval::perturb_dataset(&ds, &pm, 100 + p).unwrap();

        let mut check = |hits: usize, rho: f64| {
            let sigma = (rho * (1.0 - rho) / DRAWS as f64).sqrt();
            worst_sigma = worst_sigma.max((hits as f64 / DRAWS as f64 - rho).abs() / sigma);
        };
        for (l, &rho) in rho_z.iter().enumerate() {
            let stays = (0..DRAWS).filter(|&i| ds.categories_row(i)[l] == shifted.categories_row(i)[l]).count();
            check(stays, rho);
        }
        for (j, &rho) in rho_x.iter().enumerate() {
            let inside = (0..DRAWS).filter(|&i| (shifted.x_row(i)[j] - ds.x_row(i)[j]).abs() <= u[j]).count();
            check(inside, rho);
        }
    }
    let pass = worst_sigma <= 3.0;
    verdict(6, pass, &format!("largest deviation {worst_sigma:.2} sigma over 5 parameterizations"));
    assert!(pass);
}

/// Synthetic instance for the runtime comparison, with calibrated integer
/// weights trained on all rows.
fn runtime_instance(seed: u64) -> (EncodedDataset, mixdro::commands::CalibrationOutput) {
    let cfg = RunConfig::from_json(
        &json!({
            "schema_version": 1,
            "seed": seed,
            "data": {"kind": "synthetic", "points": 2000, "numerical": 2, "cardinalities": vec![4; 8]},
            "certainty": {"rho_x": {"constant": 0.6}, "rho_z": {"constant": 0.6}, "theta": 0.8, "precision": "integer"}
        })
        .to_string(),
        None,
    )
    .unwrap();
    let ds = cfg.dataset().unwrap();
    let cal = calibrate_on(&cfg, &ds).unwrap();
    (ds, cal)
}

fn graph_vertices(ds: &EncodedDataset, delta: &[f64], precision: Precision) -> usize {
    let rows: Vec<&[usize]> = (0..ds.len()).map(|i| ds.categories_row(i)).collect();
    GraphSet::build(&StateSpace::new(delta, precision), &ds.schema.cardinalities(), &rows).total_size().0
}

#[test]
fn criterion_7_runtime_ordering() {
    let mut lines = Vec::new();
    let mut faster = true;
    let mut sizes_ok = true;
    for seed in 0..3 {
        let (ds, cal) = runtime_instance(seed);
        let int = cal.params_with(Precision::Integer).unwrap();
        let dec = cal.params_with(Precision::OneDecimal).unwrap();
        let (vi, vd) = (
            graph_vertices(&ds, &int.delta, Precision::Integer),
            graph_vertices(&ds, &dec.delta, Precision::OneDecimal),
        );
        sizes_ok &= vd >= vi;

        let start = Instant::now();
        let graph = train(Route::Graph, &ds, &int, &TrainOptions::default());
        let graph_time = start.elapsed();
        // a cutting-plane run cut off at twice the graph time already shows the ratio
        let opts = TrainOptions { time_limit: Some(graph_time * 2), ..TrainOptions::default() };
        let start = Instant::now();
        let cp = train(Route::CuttingPlane, &ds, &int, &opts);
        let cp_time = start.elapsed();
        let (ratio, note) = match (&graph, &cp) {
            (Ok(_), Ok(c)) if c.status == TrainStatus::TimeLimit => {
                (cp_time.as_secs_f64() / graph_time.as_secs_f64(), "cutting plane stopped at the time limit")
            }
            (Ok(g), Ok(c)) => {
                sizes_ok &= relative_gap(g.objective, c.objective) <= 1e-4;
                (cp_time.as_secs_f64() / graph_time.as_secs_f64(), "both solved")
            }
            _ => (0.0, "a route failed"),
        };
        faster &= ratio >= 2.0;
        lines.push(format!(
            "seed {seed}: delta {:?}, graph {graph_time:.1?} ({}), cutting plane {cp_time:.1?} ({}), ratio {ratio:.2} [{note}], vertices {vi} integer / {vd} one-decimal",
            int.delta,
            graph.as_ref().map_or_else(|e| e.to_string(), |r| format!("{:?}", r.status)),
            cp.as_ref().map_or_else(|e| e.to_string(), |r| format!("{:?}", r.status)),
        ));
    }
    let pass = faster && sizes_ok;
    verdict(7, pass, &lines.join("; "));
    assert!(pass, "{lines:#?}");
}

fn robustness_config(seed: u64, theta: f64) -> RunConfig {
    RunConfig::from_json(
        &json!({
            "schema_version": 1,
            "seed": seed,
            "data": {"kind": "synthetic", "points": 300, "numerical": 3, "cardinalities": [3, 3, 4, 2]},
            "certainty": {"rho_x": {"constant": 0.6}, "rho_z": {"constant": 0.6}, "theta": theta},
            "solver": {"route": "graph"},
            "evaluation": {"sets": 200}
        })
        .to_string(),
        None,
    )
    .unwrap()
}

#[test]
fn criterion_8_robustness_direction() {
    const INSTANCES: u64 = 20;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..INSTANCES {
        let dro_cfg = robustness_config(seed, 0.8);
        let erm_cfg = robustness_config(seed, 1.0);
        let dro = cmd_train(&dro_cfg).unwrap();
        let erm = cmd_train(&erm_cfg).unwrap();
        assert!(dro.params.epsilon > 0.0 && erm.params.epsilon == 0.0);
        // both models face the same perturbed test sets
        let worst = |model| cmd_evaluate(&dro_cfg, Some(model)).unwrap().reports[0].worst_log_loss;
        let (d, e) = (worst(&dro.model), worst(&erm.model));
        wins += usize::from(d <= e);
        pairs.push(format!("{d:.3}/{e:.3}"));
    }
    let share = wins as f64 / INSTANCES as f64;
    let pass = share >= 0.7;
    verdict(8, pass, &format!("DRO worst log-loss <= ERM on {wins}/{INSTANCES}; DRO/ERM: {}", pairs.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_9_determinism_across_threads() {
    let cfg = robustness_config(3, 0.8);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let train = serde_json::to_string(&cmd_train(&cfg).unwrap()).unwrap();
            let eval = serde_json::to_string(&cmd_evaluate(&cfg, None).unwrap()).unwrap();
            (train, eval)
        })
    };
    let runs = [run(1), run(1), run(2), run(4)];
    let pass = runs.iter().all(|r| *r == runs[0]);
    verdict(9, pass, &format!("train and evaluate JSON identical over runs with 1, 1, 2 and 4 threads: {pass}"));
    assert!(pass);
}
