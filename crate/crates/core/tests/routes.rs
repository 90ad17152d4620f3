mod common;

use common::{certificate, erm_fit, fixtures, relative_gap};
use mixdro::calibration::{AmbiguityParams, Precision};
use mixdro::dataset::{DatasetSchema, EncodedDataset};
use mixdro::solve::{
    assemble_monolithic, train, BackendKind, Route, SubgradientOptions, TrainError, TrainOptions, TrainStatus,
};

fn conic_routes() -> [Route; 3] {
    [Route::Monolithic, Route::CuttingPlane, Route::Graph]
}

#[test]
fn conic_routes_agree_and_are_feasible() {
    let opts = TrainOptions::default();
    for f in fixtures(6, 3) {
        let reports: Vec<_> = conic_routes().iter().map(|&r| train(r, &f.ds, &f.params, &opts).unwrap()).collect();
        for rep in &reports {
            assert_eq!(rep.status, TrainStatus::Optimal, "{} {}", f.name, rep.route);
            assert!(
                relative_gap(rep.objective, reports[0].objective) <= 1e-4,
                "{}: {} vs {}",
                f.name,
                rep.objective,
                reports[0].objective
            );
            let cert = certificate(&f.ds, &f.params, &rep.coefficients, rep.lambda, &rep.r);
            assert!(cert <= 1e-6, "{} {}: certificate {cert}", f.name, rep.route);
            assert!((rep.recomputed_objective(f.params.epsilon) - rep.objective).abs() < 1e-12);
            for (j, b) in rep.coefficients.beta_x.iter().enumerate() {
                assert!(b.abs() <= f.params.gamma[j] * rep.lambda + 1e-6);
            }
        }
    }
}

#[test]
fn backends_agree_on_small_program() {
    let f = &fixtures(1, 9)[0];
    let a = train(Route::Monolithic, &f.ds, &f.params, &TrainOptions::default()).unwrap();
    let opts = TrainOptions { backend: BackendKind::Barrier, ..TrainOptions::default() };
    let b = train(Route::Monolithic, &f.ds, &f.params, &opts).unwrap();
    assert_eq!(b.backend, "barrier");
    assert!(relative_gap(a.objective, b.objective) <= 1e-6, "{} vs {}", a.objective, b.objective);
}

#[test]
fn subgradient_is_close() {
    let opts = TrainOptions::default();
    for f in fixtures(3, 4) {
        let exact = train(Route::Graph, &f.ds, &f.params, &opts).unwrap();
        let sg = train(Route::Subgradient, &f.ds, &f.params, &opts).unwrap();
        assert_eq!(sg.status, TrainStatus::StepBudget);
        assert!(sg.objective >= exact.objective - 1e-6);
        assert!(
            relative_gap(sg.objective, exact.objective) <= 1e-2,
            "{}: {} vs {}",
            f.name,
            sg.objective,
            exact.objective
        );
    }
}

#[test]
fn subgradient_budget_is_respected() {
    let f = &fixtures(1, 2)[0];
    let opts = TrainOptions {
        subgradient: SubgradientOptions { steps: 30, tune_steps: 5, ..SubgradientOptions::default() },
        ..TrainOptions::default()
    };
    let rep = train(Route::Subgradient, &f.ds, &f.params, &opts).unwrap();
    assert!(rep.iterations <= 30 + 5 * opts.subgradient.step_scales.len());
}

#[test]
fn zero_radius_is_empirical_risk() {
    for f in fixtures(3, 5) {
        let (erm_beta, erm_loss) = erm_fit(&f.ds);
        let rep = train(Route::Graph, &f.ds, &f.params.with_epsilon(0.0), &TrainOptions::default()).unwrap();
        assert!((rep.objective - erm_loss).abs() <= 1e-5, "{}: {} vs {erm_loss}", f.name, rep.objective);
        let diff =
            rep.coefficients.to_vec().iter().zip(erm_beta.to_vec()).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        assert!(diff <= 1e-3, "{}: coefficient gap {diff}", f.name);
    }
}

#[test]
fn huge_radius_drops_numerical_features() {
    for f in fixtures(2, 6) {
        let rep = train(Route::CuttingPlane, &f.ds, &f.params.with_epsilon(100.0), &TrainOptions::default()).unwrap();
        let max = rep.coefficients.beta_x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max <= 1e-4, "{}: {max}", f.name);
    }
}

#[test]
fn objective_grows_with_radius() {
    let f = &fixtures(2, 7)[1];
    let mut prev = f64::NEG_INFINITY;
    for eps in [0.0, 0.01, 0.1, 1.0, 10.0] {
        let rep = train(Route::Graph, &f.ds, &f.params.with_epsilon(eps), &TrainOptions::default()).unwrap();
        assert!(rep.objective >= prev - 1e-7, "eps {eps}: {} < {prev}", rep.objective);
        prev = rep.objective;
    }
}

#[test]
fn cutting_plane_bounds_are_monotone() {
    let f = &fixtures(4, 8)[3];
    let rep = train(Route::CuttingPlane, &f.ds, &f.params, &TrainOptions::default()).unwrap();
    assert!(rep.bounds.len() >= 2);
    for w in rep.bounds.windows(2) {
        assert!(w[1].lower >= w[0].lower);
        assert!(w[1].upper <= w[0].upper);
    }
    let last = rep.bounds.last().unwrap();
    assert!(last.upper - last.lower <= 1e-6);
    assert!(rep.gap.unwrap() <= 1e-6);
}

#[test]
fn multi_cut_reaches_same_optimum() {
    let f = &fixtures(5, 1)[4];
    let single = train(Route::CuttingPlane, &f.ds, &f.params, &TrainOptions::default()).unwrap();
    let opts = TrainOptions { multi_cut: true, ..TrainOptions::default() };
    let multi = train(Route::CuttingPlane, &f.ds, &f.params, &opts).unwrap();
    assert!(relative_gap(single.objective, multi.objective) <= 1e-5);
    assert!(multi.iterations <= single.iterations);
}

#[test]
fn no_categorical_features_needs_one_round() {
    let ds = EncodedDataset::new(
        DatasetSchema::synthetic(1, &[]),
        vec![-2.0, -1.0, 0.5, 1.0, 2.0, -0.3],
        vec![],
        vec![-1.0, -1.0, 1.0, -1.0, 1.0, 1.0],
    )
    .unwrap();
    let params = AmbiguityParams::new(vec![1.0], vec![], 0.1, Precision::Integer).unwrap();
    let rep = train(Route::CuttingPlane, &ds, &params, &TrainOptions::default()).unwrap();
    assert_eq!(rep.iterations, 1);
    assert_eq!(rep.constraints_generated, 0);
    let g = train(Route::Graph, &ds, &params, &TrainOptions::default()).unwrap();
    assert!(relative_gap(rep.objective, g.objective) <= 1e-6);
}

#[test]
fn separable_data_is_flagged() {
    let ds = EncodedDataset::new(
        DatasetSchema::synthetic(1, &[]),
        vec![-2.0, -1.0, 1.0, 2.0],
        vec![],
        vec![-1.0, -1.0, 1.0, 1.0],
    )
    .unwrap();
    let params = AmbiguityParams::new(vec![1.0], vec![], 0.0, Precision::Integer).unwrap();
    let rep = train(Route::CuttingPlane, &ds, &params, &TrainOptions::default()).unwrap();
    assert_eq!(rep.status, TrainStatus::PerfectSeparation);
    assert!(rep.objective < 1e-3);
}

#[test]
fn time_limit_stops_the_loop() {
    let f = &fixtures(6, 2)[5];
    let opts = TrainOptions { time_limit: Some(std::time::Duration::ZERO), ..TrainOptions::default() };
    let rep = train(Route::CuttingPlane, &f.ds, &f.params, &opts).unwrap();
    assert_eq!(rep.status, TrainStatus::TimeLimit);
    assert_eq!(rep.iterations, 1);
    // the repaired incumbent is still feasible
    assert!(certificate(&f.ds, &f.params, &rep.coefficients, rep.lambda, &rep.r) <= 1e-9);
}

#[test]
fn enumeration_cap_refuses_monolithic() {
    let f = &fixtures(6, 2)[5];
    assert!(assemble_monolithic(&f.ds, &f.params, 100).is_err());
    let opts = TrainOptions { enumeration_cap: 100, ..TrainOptions::default() };
    let err = train(Route::Monolithic, &f.ds, &f.params, &opts).unwrap_err();
    assert!(matches!(err, TrainError::Separation(_)), "{err}");
    assert!(err.to_string().contains("100"));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let f = &fixtures(1, 2)[0];
    let bad = AmbiguityParams::new(vec![1.0; 5], f.params.delta.clone(), 0.1, Precision::Integer).unwrap();
    assert!(train(Route::Graph, &f.ds, &bad, &TrainOptions::default()).is_err());
}

#[test]
fn report_json_is_stable() {
    let f = &fixtures(1, 2)[0];
    let a = train(Route::Graph, &f.ds, &f.params, &TrainOptions::default()).unwrap();
    let b = train(Route::Graph, &f.ds, &f.params, &TrainOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let json = serde_json::to_value(&a).unwrap();
    assert!(json.get("wall_time").is_none());
    assert!(json["graph_size"].is_array());
}
