//! End-to-end checks of the benchmark harness on a miniature unsupervised
//! experiment: run bookkeeping, determinism, aggregation, persistence, and
//! the command-line entry point.

use std::path::Path;
use std::process::Command;

use distbo::harness::{
    aggregate_curves, average_ranks, build_world, ensure_sources, load_history, load_results,
    mean_rank, persist_history, preset, report, run_experiment, save_results, Budget,
    ExperimentConfig, HistoryRecord, Method, RunOptions, RunResult, ToyParams,
};

fn tiny_cfg(methods: Vec<Method>) -> ExperimentConfig {
    let mut cfg = preset("toy").unwrap();
    cfg.methods = methods;
    cfg.repetitions = 3;
    cfg.base_seed = 11;
    cfg.budget = Budget { source_random: 2, source_bo: 2, target_random: 2, target_bo: 3 };
    cfg.toy = Some(ToyParams {
        source_gammas: vec![0.0, 0.0, 4.0],
        target_gamma: 0.0,
        sample_size: 40,
    });
    cfg.fit.max_steps = 50;
    cfg.fit.warm_steps = 15;
    cfg.acquisition.candidates = 400;
    cfg.acquisition.refine_starts = 2;
    cfg.acquisition.refine_iters = 10;
    cfg
}

fn run_tiny(methods: Vec<Method>, threads: usize) -> Vec<RunResult> {
    let cfg = tiny_cfg(methods);
    let world = build_world(&cfg).unwrap();
    let sources = distbo::harness::generate_source_evaluations(&world).unwrap();
    let grouped =
        distbo::harness::persist::group_source_histories(&sources, world.sources.len()).unwrap();
    run_experiment(&world, &grouped, &RunOptions { threads }).unwrap()
}

#[test]
fn runs_are_complete_monotone_and_ordered() {
    let methods = vec![Method::DistGp, Method::MultiGp, Method::InitGp, Method::NoneGp, Method::Rs];
    let results = run_tiny(methods.clone(), 1);
    assert_eq!(results.len(), 3 * methods.len());

    for (i, r) in results.iter().enumerate() {
        // Repetition-major, then configured method order.
        assert_eq!(r.rep, i / methods.len());
        assert_eq!(r.method, methods[i % methods.len()].name());
        assert!(r.failed.is_none(), "{}: {:?}", r.method, r.failed);

        assert_eq!(r.iterations.len(), 5, "target budget is exhausted");
        let mut running = f64::NEG_INFINITY;
        for (k, it) in r.iterations.iter().enumerate() {
            assert_eq!(it.iteration, k + 1, "iterations count from 1");
            running = running.max(it.z);
            assert_eq!(it.cum_max, running, "cumulative max tracks the running best");
            assert!(it.theta.len() == 1 && it.theta[0].is_finite());
        }

        // Only the joint-model GP kinds expose a similarity vector, one
        // entry per source task.
        let has_sims = r.iterations.iter().any(|it| it.similarities.is_some());
        match r.method.as_str() {
            "distGP" | "multiGP" => {
                assert!(has_sims, "{} should report similarities", r.method);
                for it in &r.iterations {
                    if let Some(s) = &it.similarities {
                        assert_eq!(s.len(), 3);
                    }
                }
            }
            _ => assert!(!has_sims, "{} should not report similarities", r.method),
        }
    }
}

#[test]
fn reruns_and_thread_counts_leave_results_unchanged() {
    let methods = vec![Method::DistGp, Method::NoneGp, Method::Rs];
    let a = run_tiny(methods.clone(), 1);
    let b = run_tiny(methods.clone(), 1);
    let c = run_tiny(methods, 2);
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), c.len());
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.deterministic_view(), y.deterministic_view());
        assert_eq!(x.deterministic_view(), z.deterministic_view(), "reps are shared-nothing");
    }
}

#[test]
fn curve_aggregation_matches_brute_force() {
    let results = run_tiny(vec![Method::DistGp, Method::Rs], 1);
    let curves = aggregate_curves(&results).unwrap();
    assert_eq!(curves.len(), 2);
    for curve in &curves {
        let runs: Vec<&RunResult> =
            results.iter().filter(|r| r.method == curve.method).collect();
        assert_eq!(runs.len(), 3);
        for i in 0..5 {
            let vals: Vec<f64> = runs.iter().map(|r| r.iterations[i].cum_max).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (vals.len() - 1) as f64;
            assert!((curve.mean[i] - mean).abs() < 1e-12);
            assert!((curve.std[i] - var.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn ranks_average_ties_and_conserve_their_sum() {
    // 1 = best; the tied pair straddles ranks 2 and 3.
    assert_eq!(average_ranks(&[0.9, 0.4, 0.4, 0.1]), vec![1.0, 2.5, 2.5, 4.0]);
    assert_eq!(average_ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);

    let results = run_tiny(vec![Method::DistGp, Method::NoneGp, Method::Rs], 1);
    let ranks = mean_rank(&results).unwrap();
    let m = ranks.len() as f64;
    for i in 0..5 {
        let total: f64 = ranks.iter().map(|c| c.mean[i]).sum();
        assert!(
            (total - m * (m + 1.0) / 2.0).abs() < 1e-12,
            "rank sum at iteration {}: {total}",
            i + 1
        );
    }
}

#[test]
fn results_survive_persistence_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let results = run_tiny(vec![Method::DistGp, Method::Rs], 1);
    save_results(&path, &results).unwrap();
    let loaded = load_results(&path).unwrap();
    assert_eq!(results.len(), loaded.len());
    for (a, b) in results.iter().zip(&loaded) {
        assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
        assert_eq!(a.wall_ms, b.wall_ms);
        assert_eq!(a.max_fit_ms, b.max_fit_ms);
    }
}

#[test]
fn history_round_trip_preserves_every_record_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hist.jsonl");
    let awkward = [
        0.1 + 0.2,
        -0.0,
        f64::MIN_POSITIVE,
        1.0 / 3.0,
        -1e308,
        5e-324,
        123456789.123456789,
    ];
    let records: Vec<HistoryRecord> = (0..1000)
        .map(|i| HistoryRecord {
            task: i % 7,
            iteration: i / 7 + 1,
            theta: vec![awkward[i % awkward.len()], i as f64 * 0.001],
            z: awkward[(i * 3 + 1) % awkward.len()] * if i % 2 == 0 { 1.0 } else { -1.0 },
            rule: if i % 3 == 0 { "random".into() } else { "expected_improvement".into() },
        })
        .collect();
    persist_history(&path, &records).unwrap();
    let loaded = load_history(&path).unwrap();
    assert_eq!(records, loaded);

    // Bit-exactness includes the sign of zero.
    let neg_zero = loaded.iter().find(|r| r.theta[0] == 0.0).unwrap();
    assert!(neg_zero.theta[0].is_sign_negative());
}

#[test]
fn malformed_history_lines_are_rejected_with_their_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hist.jsonl");
    let good = r#"{"task":0,"iteration":1,"theta":[0.5],"z":0.25,"rule":"random"}"#;
    std::fs::write(&path, format!("{good}\n\n{good}\nnot json at all\n")).unwrap();
    let err = load_history(&path).unwrap_err().to_string();
    assert!(err.contains("line 4"), "error should name line 4, got: {err}");

    // Blank lines alone are fine.
    std::fs::write(&path, format!("{good}\n\n{good}\n")).unwrap();
    assert_eq!(load_history(&path).unwrap().len(), 2);
}

#[test]
fn source_histories_reload_identically() {
    let cfg = tiny_cfg(vec![Method::Rs]);
    let world = build_world(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sources.jsonl");
    let first = ensure_sources(&world, &path).unwrap();
    assert!(path.exists());
    let reloaded = ensure_sources(&world, &path).unwrap();
    assert_eq!(first, reloaded, "reading the cache reproduces the generated histories");
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn report_writes_the_same_bytes_twice() {
    let results = run_tiny(vec![Method::DistGp, Method::NoneGp], 1);
    let dir = tempfile::tempdir().unwrap();
    report(&results, dir.path()).unwrap();
    let first = dir_snapshot(dir.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["curves.csv", "ranks.csv", "events.csv", "summary.json"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert!(names.contains(&"similarity_distGP.csv"), "joint GP runs carry similarities");

    report(&results, dir.path()).unwrap();
    assert_eq!(first, dir_snapshot(dir.path()), "regenerating the report changes nothing");
}

fn tiny_toml(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
kind = "toy"
methods = ["distGP", "noneGP", "RS"]
repetitions = 2
base_seed = 5

[budget]
source_random = 2
source_bo = 1
target_random = 2
target_bo = 2

[fit]
max_steps = 40
warm_steps = 10

[acquisition]
candidates = 300
refine_starts = 2
refine_iters = 8

[toy]
source_gammas = [0.0, 4.0]
target_gamma = 0.0
sample_size = 30
"#,
    )
    .unwrap();
    path
}

#[test]
fn cli_runs_an_experiment_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_distbo");
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toml(dir.path());
    let out = dir.path().join("out");

    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--threads", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["sources.jsonl", "results.jsonl", "curves.csv", "ranks.csv", "summary.json"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }

    // Rebuilding the report from persisted results succeeds on its own.
    let status = Command::new(bin).args(["report", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());

    // A second full run reuses the persisted sources and reproduces the
    // same results apart from wall-clock timings.
    let results_before = load_results(&out.join("results.jsonl")).unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--threads", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    let results_after = load_results(&out.join("results.jsonl")).unwrap();
    assert_eq!(results_before.len(), results_after.len());
    for (a, b) in results_before.iter().zip(&results_after) {
        assert_eq!(a.deterministic_view(), b.deterministic_view());
    }
}

#[test]
fn cli_rejects_bad_configs_with_exit_code_two() {
    let bin = env!("CARGO_BIN_EXE_distbo");
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"toy\"\nrepetitions = 0\n").unwrap();
    let status = Command::new(bin).args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2), "invalid config");

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "kind = \"toy\"\nbanana = 1\n").unwrap();
    let status = Command::new(bin).args(["run", "--config"]).arg(&unknown).status().unwrap();
    assert_eq!(status.code(), Some(2), "unknown field");

    let status = Command::new(bin)
        .args(["run", "--config", "/nonexistent/missing.toml"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "missing file");
}
