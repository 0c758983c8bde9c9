//! The external-objective adapter driven end to end against the bundled
//! stub server: per-evaluation agreement with the closed form, sequential
//! reuse of one subprocess, and a full experiment over an external command.

use std::time::Duration;

use distbo::harness::{
    build_world, run_experiment, Budget, EmbeddingChoice, ExperimentConfig, ExperimentKind,
    ExternalParams, Method, RunOptions,
};
use distbo::taskgen::ExternalObjective;

fn stub_command(center: &str) -> String {
    format!("{} stub --center {center}", env!("CARGO_BIN_EXE_distbo"))
}

#[test]
fn stub_answers_match_the_closed_form() {
    let mut obj =
        ExternalObjective::spawn(&stub_command("0.5,-1.25"), Duration::from_secs(20)).unwrap();
    let cases = [
        vec![0.5, -1.25],
        vec![0.0, 0.0],
        vec![2.5, 3.0],
        vec![-1.0, 0.1 + 0.2],
        vec![1e-3, -4.0],
    ];
    for theta in &cases {
        let got = obj.eval(theta).unwrap();
        let d2 = (theta[0] - 0.5).powi(2) + (theta[1] + 1.25).powi(2);
        let want = (-d2 / 2.0).exp();
        assert!(
            (got - want).abs() <= 1e-12,
            "theta {theta:?}: {got} vs {want}"
        );
    }
}

#[test]
fn one_subprocess_serves_many_sequential_evaluations() {
    let mut obj = ExternalObjective::spawn(&stub_command("0.0"), Duration::from_secs(20)).unwrap();
    let mut last = f64::INFINITY;
    for k in 0..50 {
        let theta = [k as f64 / 25.0];
        let z = obj.eval(&theta).unwrap();
        assert!(z <= last, "moving away from the center cannot improve");
        last = z;
    }
    assert!((obj.eval(&[0.0]).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn mismatched_dimension_surfaces_as_an_evaluation_error() {
    let mut obj = ExternalObjective::spawn(&stub_command("0.0"), Duration::from_secs(5)).unwrap();
    assert!(obj.eval(&[1.0, 2.0]).is_err(), "stub serves one dimension");
}

fn external_cfg(methods: Vec<Method>) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::External,
        methods,
        repetitions: 2,
        base_seed: 3,
        out_dir: None,
        budget: Budget { source_random: 1, source_bo: 0, target_random: 3, target_bo: 4 },
        embedding: EmbeddingChoice::Default,
        fit: {
            let mut f = distbo::harness::FitKnobs::default();
            f.max_steps = 40;
            f.warm_steps = 10;
            f
        },
        acquisition: {
            let mut a = distbo::acquisition::AcquisitionConfig::default();
            a.candidates = 300;
            a.refine_starts = 2;
            a.refine_iters = 8;
            a
        },
        toy: None,
        counter: None,
        rff: None,
        csv: None,
        external: Some(ExternalParams {
            command: stub_command("0.25,-0.5"),
            timeout_secs: 20.0,
            dims: vec![
                distbo::acquisition::Dimension::linear("a", -2.0, 2.0),
                distbo::acquisition::Dimension::linear("b", -2.0, 2.0),
            ],
        }),
    }
}

#[test]
fn target_only_methods_optimize_an_external_command() {
    let cfg = external_cfg(vec![Method::NoneGp, Method::Rs]);
    cfg.validate().unwrap();
    let world = build_world(&cfg).unwrap();
    assert!(world.sources.is_empty(), "external experiments have no source tasks");

    let results = run_experiment(&world, &[], &RunOptions { threads: 1 }).unwrap();
    assert_eq!(results.len(), 4);
    for r in &results {
        assert!(r.failed.is_none(), "{}: {:?}", r.method, r.failed);
        assert_eq!(r.iterations.len(), 7);
        let best = r.iterations.last().unwrap().cum_max;
        assert!(best > 0.2, "{} found {best}, the box center scores ~0.73", r.method);
        for it in &r.iterations {
            let d2 = (it.theta[0] - 0.25).powi(2) + (it.theta[1] + 0.5).powi(2);
            assert!(
                (it.z - (-d2 / 2.0).exp()).abs() < 1e-12,
                "recorded value disagrees with the stub's closed form"
            );
        }
    }
}

#[test]
fn source_needing_methods_are_rejected_for_external_kinds() {
    let cfg = external_cfg(vec![Method::DistGp]);
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("distGP"), "error names the offending method: {err}");
}
