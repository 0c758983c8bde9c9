//! Command-line front end: generate source histories, run benchmark
//! experiments, rebuild reports, and serve a toy objective over the
//! line-JSON protocol for external-objective testing.
//!
//! Exit codes: 0 on success, 2 for configuration or input parse problems,
//! 3 when the benchmark finished but at least one run failed its
//! evaluation budget, 1 for anything else.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distbo::harness::{
    self, build_world, ensure_sources, preset, report, run_experiment, save_results,
    ExperimentConfig, Method, RunOptions, DEFAULT_OUT, OUT_ENV,
};
use distbo::{Error, Result};

#[derive(Parser)]
#[command(name = "distbo", version, about = "Transfer Bayesian optimization benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize every source task and persist the evaluation histories.
    GenSources(RunArgs),
    /// Run the configured methods over all repetitions, then write
    /// results and reports.
    Run(RunArgs),
    /// Rebuild report files from persisted results.
    Report {
        /// Directory holding results.jsonl; reports land next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve exp(-|theta - center|^2 / 2) over stdin/stdout line JSON.
    Stub {
        /// Peak location, comma-separated per dimension.
        #[arg(long, default_value = "0.0", value_delimiter = ',')]
        center: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: toy, counter, rff-a, or rff-b.
    #[arg(long)]
    preset: Option<String>,
    /// Subset of methods to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Repetition count override.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's, then $DISTBO_OUT,
    /// then ./distbo-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for repetitions; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::Config("pass --config FILE or --preset NAME".into()))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --config with --preset"),
    };
    if !args.methods.is_empty() {
        cfg.methods =
            args.methods.iter().map(|s| Method::parse(s)).collect::<Result<Vec<_>>>()?;
    }
    if let Some(reps) = args.reps {
        cfg.repetitions = reps;
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn gen_sources(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let out = resolve_out(&cfg);
    let world = build_world(&cfg)?;
    let records = harness::generate_source_evaluations(&world)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("sources.jsonl");
    harness::persist_history(&path, &records)?;
    println!(
        "wrote {} evaluations across {} source tasks to {}",
        records.len(),
        world.sources.len(),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let out = resolve_out(&cfg);
    let world = build_world(&cfg)?;
    std::fs::create_dir_all(&out)?;
    let sources = ensure_sources(&world, &out.join("sources.jsonl"))?;
    let results =
        run_experiment(&world, &sources, &RunOptions { threads: args.threads })?;
    save_results(&out.join("results.jsonl"), &results)?;
    let failed = results.iter().filter(|r| r.failed.is_some()).count();
    if results.len() > failed {
        report(&results, &out)?;
        for curve in harness::aggregate_curves(&results)? {
            let last = curve.mean.last().copied().unwrap_or(f64::NAN);
            let std = curve.std.last().copied().unwrap_or(f64::NAN);
            println!("{:<12} final {:.4} +- {:.4}", curve.method, last, std);
        }
    }
    println!("results in {}", out.display());
    if failed > 0 {
        eprintln!("{failed} of {} runs failed their evaluation budget", results.len());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn rebuild_report(out: Option<PathBuf>) -> Result<ExitCode> {
    let out = out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let results = harness::load_results(&out.join("results.jsonl"))?;
    report(&results, &out)?;
    println!("reports rebuilt in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn serve_stub(center: &[f64]) -> Result<ExitCode> {
    #[derive(serde::Deserialize)]
    struct Request {
        theta: Vec<f64>,
    }
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("stub request {line:?}: {e}")))?;
        if req.theta.len() != center.len() {
            return Err(Error::Config(format!(
                "stub got {} dimensions, serves {}",
                req.theta.len(),
                center.len()
            )));
        }
        let d2: f64 = req.theta.iter().zip(center).map(|(t, c)| (t - c) * (t - c)).sum();
        let z = (-d2 / 2.0).exp();
        writeln!(stdout, "{}", serde_json::json!({ "z": z }))?;
        stdout.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::GenSources(args) => gen_sources(&args),
        Cmd::Run(args) => run(&args),
        Cmd::Report { out } => rebuild_report(out),
        Cmd::Stub { center } => serve_stub(&center),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
