//! Line-JSON persistence for evaluation histories and run results, plus
//! the CSV/JSON report writer. Floats survive a save/load cycle exactly,
//! so reloaded histories are bit-identical to what was written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{aggregate_curves, mean_rank, MethodCurve, RunResult};

/// One persisted objective evaluation of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub task: usize,
    /// 1-based within the task.
    pub iteration: usize,
    /// Hyperparameters in native units.
    pub theta: Vec<f64>,
    pub z: f64,
    /// Which rule proposed θ.
    pub rule: String,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn persist_history(path: &Path, records: &[HistoryRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    read_jsonl(path)
}

/// Regroup flat records into per-task histories ordered by iteration.
/// Every task in `0..n_tasks` must be covered by a contiguous 1..=len
/// iteration sequence.
pub fn group_source_histories(
    records: &[HistoryRecord],
    n_tasks: usize,
) -> Result<Vec<Vec<(Vec<f64>, f64)>>> {
    let mut grouped: Vec<Vec<&HistoryRecord>> = vec![Vec::new(); n_tasks];
    for r in records {
        if r.task >= n_tasks {
            return Err(Error::Contract(format!(
                "history names task {} but the experiment has {n_tasks} source tasks",
                r.task
            )));
        }
        grouped[r.task].push(r);
    }
    let mut out = Vec::with_capacity(n_tasks);
    for (task, mut recs) in grouped.into_iter().enumerate() {
        recs.sort_by_key(|r| r.iteration);
        for (i, r) in recs.iter().enumerate() {
            if r.iteration != i + 1 {
                return Err(Error::Contract(format!(
                    "task {task} history is not contiguous: expected iteration {}, found {}",
                    i + 1,
                    r.iteration
                )));
            }
        }
        if recs.is_empty() {
            return Err(Error::Contract(format!("task {task} has no persisted evaluations")));
        }
        out.push(recs.into_iter().map(|r| (r.theta.clone(), r.z)).collect());
    }
    Ok(out)
}

pub fn save_results(path: &Path, results: &[RunResult]) -> Result<()> {
    write_jsonl(path, results)
}

pub fn load_results(path: &Path) -> Result<Vec<RunResult>> {
    read_jsonl(path)
}

fn csv_write_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!("is_io_error guarantees an io kind"),
        }
    } else {
        Error::Contract(format!("csv write: {e}"))
    }
}

fn write_curve_csv(path: &Path, curves: &[MethodCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["iteration".to_string()];
    for c in curves {
        header.push(format!("{}_mean", c.method));
        header.push(format!("{}_std", c.method));
    }
    w.write_record(&header).map_err(csv_write_err)?;
    let iters = curves.first().map_or(0, |c| c.mean.len());
    for i in 0..iters {
        let mut row = vec![(i + 1).to_string()];
        for c in curves {
            row.push(c.mean[i].to_string());
            row.push(c.std[i].to_string());
        }
        w.write_record(&row).map_err(csv_write_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_similarity_csv(path: &Path, runs: &[&RunResult]) -> Result<Option<()>> {
    let n_sources = runs
        .iter()
        .flat_map(|r| &r.iterations)
        .find_map(|it| it.similarities.as_ref().map(Vec::len));
    let Some(n_sources) = n_sources else {
        return Ok(None);
    };
    let iters = runs.iter().map(|r| r.iterations.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["iteration".to_string()];
    for s in 0..n_sources {
        header.push(format!("source{s}_mean"));
    }
    w.write_record(&header).map_err(csv_write_err)?;
    for i in 0..iters {
        let present: Vec<&Vec<f64>> = runs
            .iter()
            .filter_map(|r| r.iterations.get(i))
            .filter_map(|it| it.similarities.as_ref())
            .collect();
        if present.is_empty() {
            continue;
        }
        let mut row = vec![(i + 1).to_string()];
        for s in 0..n_sources {
            let mean = present.iter().map(|v| v[s]).sum::<f64>() / present.len() as f64;
            row.push(mean.to_string());
        }
        w.write_record(&row).map_err(csv_write_err)?;
    }
    w.flush()?;
    Ok(Some(()))
}

fn write_events_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["method", "rep", "iteration", "kind", "detail"]).map_err(csv_write_err)?;
    for r in results {
        for e in &r.events {
            w.write_record([
                r.method.as_str(),
                &r.rep.to_string(),
                &e.iteration.to_string(),
                &e.kind,
                &e.detail,
            ])
            .map_err(csv_write_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    completed: usize,
    failed: usize,
    final_mean: Option<f64>,
    final_std: Option<f64>,
    wall_ms_mean: f64,
    max_fit_ms: u64,
}

fn write_summary(path: &Path, results: &[RunResult], curves: &[MethodCurve]) -> Result<()> {
    // BTreeMap keys keep the output byte-stable across runs.
    let mut methods = std::collections::BTreeMap::new();
    let mut names: Vec<&str> = results.iter().map(|r| r.method.as_str()).collect();
    names.dedup();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.method == name).collect();
        let completed = runs.iter().filter(|r| r.failed.is_none()).count();
        let curve = curves.iter().find(|c| c.method == name);
        methods.insert(
            name.to_string(),
            MethodSummary {
                completed,
                failed: runs.len() - completed,
                final_mean: curve.and_then(|c| c.mean.last().copied()),
                final_std: curve.and_then(|c| c.std.last().copied()),
                wall_ms_mean: runs.iter().map(|r| r.wall_ms as f64).sum::<f64>()
                    / runs.len() as f64,
                max_fit_ms: runs.iter().map(|r| r.max_fit_ms).max().unwrap_or(0),
            },
        );
    }
    let iterations = results
        .iter()
        .find(|r| r.failed.is_none())
        .map_or(0, |r| r.iterations.len());
    let reps = results.iter().map(|r| r.rep).max().map_or(0, |m| m + 1);
    let doc = serde_json::json!({
        "iterations": iterations,
        "repetitions": reps,
        "methods": methods,
    });
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &doc)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Write every report artifact for a result set into `out_dir`:
/// `curves.csv`, `ranks.csv`, one `similarity_<method>.csv` per method
/// that exposes task similarities, `events.csv`, and `summary.json`.
/// Pure function of the results, so re-running it is byte-idempotent.
pub fn report(results: &[RunResult], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let curves = aggregate_curves(results)?;
    write_curve_csv(&out_dir.join("curves.csv"), &curves)?;
    let ranks = mean_rank(results)?;
    write_curve_csv(&out_dir.join("ranks.csv"), &ranks)?;
    let mut seen: Vec<&str> = Vec::new();
    for r in results {
        if r.failed.is_none() && !seen.contains(&r.method.as_str()) {
            seen.push(&r.method);
        }
    }
    for method in seen {
        let runs: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.failed.is_none() && r.method == method)
            .collect();
        write_similarity_csv(&out_dir.join(format!("similarity_{method}.csv")), &runs)?;
    }
    write_events_csv(&out_dir.join("events.csv"), results)?;
    write_summary(&out_dir.join("summary.json"), results, &curves)?;
    Ok(())
}
