//! Experiment orchestration: build a benchmark world (source tasks plus a
//! target drawn fresh per repetition), generate source evaluation
//! histories with plain-GP optimization, run every method over repeated
//! seeds, and aggregate maximum-observed curves and mean ranks.

pub mod persist;
pub mod run;
pub mod tasks;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, Dimension};
use crate::embeddings::{DatasetKind, EmbeddingConfig, EmbeddingMode, DEFAULT_BATCH};
use crate::error::{Error, Result};
use crate::surrogates::{SurrogateKind, BLR_FEATURE_DIM, MAX_FIT_STEPS, WARM_FIT_STEPS};

pub use persist::{load_history, load_results, persist_history, report, save_results, HistoryRecord};
pub use run::{ensure_sources, generate_source_evaluations, run_experiment, RunOptions};
pub use tasks::{build_world, ExperimentWorld, ObjectiveImpl, TaskInstance};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "DISTBO_OUT";
/// Fallback output directory when neither flag, config, nor env names one.
pub const DEFAULT_OUT: &str = "distbo-out";
/// Warm-start selection: tasks taken and evaluations per task.
pub const WARM_TASKS: usize = 3;
pub const WARM_PER_TASK: usize = 3;
/// Consecutive objective failures tolerated per iteration before a run is
/// abandoned.
pub const EVAL_RETRIES: usize = 5;

/// All eleven benchmark methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "distGP")]
    DistGp,
    #[serde(rename = "distBLR")]
    DistBlr,
    #[serde(rename = "manualGP")]
    ManualGp,
    #[serde(rename = "manualBLR")]
    ManualBlr,
    #[serde(rename = "multiGP")]
    MultiGp,
    #[serde(rename = "multiBLR")]
    MultiBlr,
    #[serde(rename = "initGP")]
    InitGp,
    #[serde(rename = "initBLR")]
    InitBlr,
    #[serde(rename = "noneGP")]
    NoneGp,
    #[serde(rename = "noneBLR")]
    NoneBlr,
    #[serde(rename = "RS")]
    Rs,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::DistGp,
        Method::DistBlr,
        Method::ManualGp,
        Method::ManualBlr,
        Method::MultiGp,
        Method::MultiBlr,
        Method::InitGp,
        Method::InitBlr,
        Method::NoneGp,
        Method::NoneBlr,
        Method::Rs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DistGp => "distGP",
            Method::DistBlr => "distBLR",
            Method::ManualGp => "manualGP",
            Method::ManualBlr => "manualBLR",
            Method::MultiGp => "multiGP",
            Method::MultiBlr => "multiBLR",
            Method::InitGp => "initGP",
            Method::InitBlr => "initBLR",
            Method::NoneGp => "noneGP",
            Method::NoneBlr => "noneBLR",
            Method::Rs => "RS",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }

    /// The surrogate this method fits, if any (random search has none).
    pub fn surrogate(self) -> Option<SurrogateKind> {
        match self {
            Method::DistGp => Some(SurrogateKind::DistGP),
            Method::DistBlr => Some(SurrogateKind::DistBLR),
            Method::ManualGp => Some(SurrogateKind::ManualGP),
            Method::ManualBlr => Some(SurrogateKind::ManualBLR),
            Method::MultiGp => Some(SurrogateKind::MultiGP),
            Method::MultiBlr => Some(SurrogateKind::MultiBLR),
            Method::InitGp | Method::NoneGp => Some(SurrogateKind::PlainGP),
            Method::InitBlr | Method::NoneBlr => Some(SurrogateKind::PlainBLR),
            Method::Rs => None,
        }
    }

    /// How the method schedules its target iterations.
    pub fn family(self) -> Family {
        match self {
            Method::DistGp | Method::DistBlr | Method::ManualGp | Method::ManualBlr => {
                Family::Transfer
            }
            Method::MultiGp | Method::MultiBlr => Family::MultiTask,
            Method::InitGp | Method::InitBlr => Family::WarmStart,
            Method::NoneGp | Method::NoneBlr => Family::TargetOnly,
            Method::Rs => Family::Random,
        }
    }

    /// Whether this method consumes source-task evaluation histories.
    pub fn uses_sources(self) -> bool {
        !matches!(self.family(), Family::TargetOnly | Family::Random)
    }

    /// Whether this method needs handcrafted meta-feature vectors.
    pub fn needs_manual_features(self) -> bool {
        matches!(
            self,
            Method::ManualGp | Method::ManualBlr | Method::InitGp | Method::InitBlr
        )
    }
}

/// Iteration-scheduling families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Meta-informed transfer: the proposal rule applies from iteration 1,
    /// fitted on source evaluations alone.
    Transfer,
    /// Task-index transfer: one random evaluation, then proposals.
    MultiTask,
    /// Plain optimization initialized by the best θs of the most similar
    /// source tasks.
    WarmStart,
    /// Plain optimization: a random phase, then proposals.
    TargetOnly,
    /// Uniform random throughout.
    Random,
}

/// What is being benchmarked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Toy,
    Counterexample,
    RffA,
    RffB,
    Csv,
    External,
}

/// Random and model-guided iteration counts for source generation and for
/// the plain-optimization methods on the target. Transfer methods run
/// `target_total()` iterations under their own schedules.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub source_random: usize,
    pub source_bo: usize,
    pub target_random: usize,
    pub target_bo: usize,
}

impl Budget {
    pub fn source_total(&self) -> usize {
        self.source_random + self.source_bo
    }

    pub fn target_total(&self) -> usize {
        self.target_random + self.target_bo
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParams {
    pub source_gammas: Vec<f64>,
    pub target_gamma: f64,
    pub sample_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterParams {
    pub sample_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RffParams {
    pub n_sources: usize,
    pub sample_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvParams {
    /// One file per task; `target` indexes into this list.
    pub paths: Vec<PathBuf>,
    pub target: usize,
    pub label_column: Option<String>,
    pub data_kind: DatasetKind,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Regularizer range; defaults depend on `data_kind`.
    #[serde(default)]
    pub reg_range: Option<(f64, f64)>,
    /// Per-dimension bandwidth range; defaults depend on `data_kind`.
    #[serde(default)]
    pub bandwidth_range: Option<(f64, f64)>,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalParams {
    /// Shell command implementing the line-JSON objective protocol.
    pub command: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    pub dims: Vec<Dimension>,
}

fn default_timeout() -> f64 {
    60.0
}

/// Marginal-likelihood fit knobs, uniform across methods in a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitKnobs {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warm_steps: usize,
    pub feature_width: usize,
}

impl Default for FitKnobs {
    fn default() -> Self {
        FitKnobs {
            batch_size: DEFAULT_BATCH,
            max_steps: MAX_FIT_STEPS,
            warm_steps: WARM_FIT_STEPS,
            feature_width: BLR_FEATURE_DIM,
        }
    }
}

/// Which distribution embedding the dist methods use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    /// Concatenated marginal and conditional summaries picked by dataset
    /// kind (mean embedding only when unlabeled).
    #[default]
    Default,
    /// Mean embedding of the joint feature map on [x, y].
    Joint,
    /// Marginal mean embedding only.
    Marginal,
}

impl EmbeddingChoice {
    pub fn resolve(self, kind: DatasetKind) -> EmbeddingConfig {
        match self {
            EmbeddingChoice::Default => EmbeddingConfig::for_kind(kind),
            EmbeddingChoice::Joint => EmbeddingConfig::new(EmbeddingMode::JointMean),
            EmbeddingChoice::Marginal => EmbeddingConfig::new(EmbeddingMode::MarginalOnly),
        }
    }
}

/// A full experiment description, loadable from TOML.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub budget: Budget,
    #[serde(default)]
    pub embedding: EmbeddingChoice,
    #[serde(default)]
    pub fit: FitKnobs,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub toy: Option<ToyParams>,
    #[serde(default)]
    pub counter: Option<CounterParams>,
    #[serde(default)]
    pub rff: Option<RffParams>,
    #[serde(default)]
    pub csv: Option<CsvParams>,
    #[serde(default)]
    pub external: Option<ExternalParams>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods list must not be empty".into()));
        }
        let b = &self.budget;
        if b.source_total() == 0 || b.target_total() == 0 {
            return Err(Error::Config("source and target budgets must be at least 1".into()));
        }
        self.acquisition.validate()?;
        if self.fit.max_steps == 0 || self.fit.warm_steps == 0 || self.fit.batch_size == 0 {
            return Err(Error::Config("fit step and batch counts must be at least 1".into()));
        }
        match self.kind {
            ExperimentKind::Toy => {
                let t = self.section(self.toy.as_ref(), "toy")?;
                if t.source_gammas.is_empty() {
                    return Err(Error::Config("toy needs at least one source task".into()));
                }
                if t.sample_size == 0 {
                    return Err(Error::Config("toy sample size must be at least 1".into()));
                }
            }
            ExperimentKind::Counterexample => {
                let c = self.section(self.counter.as_ref(), "counter")?;
                if c.sample_size < 2 {
                    return Err(Error::Config("counter sample size must be at least 2".into()));
                }
            }
            ExperimentKind::RffA | ExperimentKind::RffB => {
                let r = self.section(self.rff.as_ref(), "rff")?;
                if r.n_sources == 0 {
                    return Err(Error::Config("rff needs at least one source task".into()));
                }
                if r.sample_size < 2 {
                    return Err(Error::Config("rff sample size must be at least 2".into()));
                }
            }
            ExperimentKind::Csv => {
                let c = self.section(self.csv.as_ref(), "csv")?;
                if c.paths.len() < 2 {
                    return Err(Error::Config(
                        "csv needs at least two files: sources and a target".into(),
                    ));
                }
                if c.target >= c.paths.len() {
                    return Err(Error::Config(format!(
                        "csv target index {} out of range for {} files",
                        c.target,
                        c.paths.len()
                    )));
                }
                if c.data_kind == DatasetKind::Unsupervised {
                    return Err(Error::Config(
                        "csv tasks need labels: the objective fits a supervised model".into(),
                    ));
                }
            }
            ExperimentKind::External => {
                let e = self.section(self.external.as_ref(), "external")?;
                if e.command.trim().is_empty() {
                    return Err(Error::Config("external command must not be empty".into()));
                }
                if e.dims.is_empty() {
                    return Err(Error::Config("external needs at least one dimension".into()));
                }
                if !(e.timeout_secs > 0.0) {
                    return Err(Error::Config("external timeout must be positive".into()));
                }
                if let Some(m) = self.methods.iter().find(|m| m.uses_sources()) {
                    return Err(Error::Config(format!(
                        "external experiments have no source tasks; method {} cannot run \
                         (use noneGP, noneBLR, RS)",
                        m.name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn section<'a, T>(&self, field: Option<&'a T>, name: &str) -> Result<&'a T> {
        field.ok_or_else(|| {
            Error::Config(format!("kind {:?} needs a [{name}] section", self.kind))
        })
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Benchmark-scale defaults for the built-in experiments.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = |kind, budget| ExperimentConfig {
        kind,
        methods: Method::ALL.to_vec(),
        repetitions: 30,
        base_seed: 0,
        out_dir: None,
        budget,
        embedding: EmbeddingChoice::Default,
        fit: FitKnobs::default(),
        acquisition: AcquisitionConfig::default(),
        toy: None,
        counter: None,
        rff: None,
        csv: None,
        external: None,
    };
    let cfg = match name.trim().to_ascii_lowercase().as_str() {
        "toy" => {
            let mut c = base(
                ExperimentKind::Toy,
                Budget { source_random: 10, source_bo: 20, target_random: 5, target_bo: 10 },
            );
            let mut gammas = vec![0.0; 3];
            gammas.extend(std::iter::repeat(4.0).take(12));
            c.toy = Some(ToyParams { source_gammas: gammas, target_gamma: 0.0, sample_size: 500 });
            c
        }
        "counter" => {
            let mut c = base(
                ExperimentKind::Counterexample,
                Budget { source_random: 50, source_bo: 75, target_random: 20, target_bo: 30 },
            );
            c.counter = Some(CounterParams { sample_size: 5000 });
            c
        }
        "rff-a" | "rff-b" => {
            let kind = if name.trim().eq_ignore_ascii_case("rff-a") {
                ExperimentKind::RffA
            } else {
                ExperimentKind::RffB
            };
            let mut c = base(
                kind,
                Budget { source_random: 75, source_bo: 75, target_random: 25, target_bo: 75 },
            );
            c.rff = Some(RffParams { n_sources: 10, sample_size: 5000 });
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected toy, counter, rff-a, or rff-b"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Stable seed derivation: mixes a base seed, a context tag, and an index
/// through splitmix64 so every task, repetition, and method gets an
/// independent deterministic stream.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One loggable incident during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub iteration: usize,
    pub kind: String,
    pub detail: String,
}

/// One target iteration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based; initializations count.
    pub iteration: usize,
    /// Proposed θ in native units.
    pub theta: Vec<f64>,
    /// Observed objective value.
    pub z: f64,
    /// Running maximum of z.
    pub cum_max: f64,
    /// Which rule proposed θ.
    pub rule: String,
    /// Learned similarity of each source task to the target, when the
    /// iteration's surrogate exposes one.
    pub similarities: Option<Vec<f64>>,
}

/// One method's complete pass over one target repetition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
    pub events: Vec<RunEvent>,
    /// Fatal error that cut the run short, if any.
    pub failed: Option<String>,
    pub wall_ms: u64,
    /// Longest single surrogate fit in this run.
    pub max_fit_ms: u64,
}

impl RunResult {
    /// Everything except wall-clock timings, for determinism comparisons.
    pub fn deterministic_view(&self) -> (&str, usize, u64, &[IterationRecord], &[RunEvent], &Option<String>) {
        (&self.method, self.rep, self.seed, &self.iterations, &self.events, &self.failed)
    }
}

/// Per-method aggregate over repetitions: elementwise mean and sample
/// standard deviation by iteration (of cumulative max, or of rank).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn completed_by_method<'a>(
    results: &'a [RunResult],
) -> Result<(Vec<&'a str>, Vec<Vec<&'a RunResult>>, usize)> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if r.failed.is_none() && !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    if order.is_empty() {
        return Err(Error::Contract("no completed runs to aggregate".into()));
    }
    let groups: Vec<Vec<&RunResult>> = order
        .iter()
        .map(|m| {
            results.iter().filter(|r| r.failed.is_none() && r.method == *m).collect::<Vec<_>>()
        })
        .collect();
    let iters = groups[0][0].iterations.len();
    for g in &groups {
        for r in g {
            if r.iterations.len() != iters {
                return Err(Error::Contract(format!(
                    "aggregation needs equal iteration counts: {} has {}, expected {iters}",
                    r.method,
                    r.iterations.len()
                )));
            }
        }
    }
    Ok((order, groups, iters))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± sample std of the cumulative-max curve, per method.
pub fn aggregate_curves(results: &[RunResult]) -> Result<Vec<MethodCurve>> {
    let (order, groups, iters) = completed_by_method(results)?;
    Ok(order
        .iter()
        .zip(&groups)
        .map(|(m, runs)| {
            let mut mean = Vec::with_capacity(iters);
            let mut std = Vec::with_capacity(iters);
            for i in 0..iters {
                let vals: Vec<f64> = runs.iter().map(|r| r.iterations[i].cum_max).collect();
                let (mu, sd) = mean_std(&vals);
                mean.push(mu);
                std.push(sd);
            }
            MethodCurve { method: m.to_string(), mean, std }
        })
        .collect())
}

/// Average ranks for one iteration's values: rank 1 is the largest value,
/// ties receive the mean of the ranks they straddle.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite values"));
    let mut ranks = vec![0.0; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j < m && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mean_rank;
        }
        i = j;
    }
    ranks
}

/// Mean ± sample std of each method's rank by iteration. Within every
/// repetition and iteration, methods are ranked by cumulative max
/// (1 = best, ties averaged); requires each method to have completed the
/// same repetitions.
pub fn mean_rank(results: &[RunResult]) -> Result<Vec<MethodCurve>> {
    let (order, groups, iters) = completed_by_method(results)?;
    let reps: Vec<usize> = {
        let mut r: Vec<usize> = groups[0].iter().map(|r| r.rep).collect();
        r.sort_unstable();
        r
    };
    let mut by_rep: Vec<Vec<&RunResult>> = Vec::with_capacity(reps.len());
    for &rep in &reps {
        let row: Vec<&RunResult> = groups
            .iter()
            .map(|g| {
                g.iter()
                    .find(|r| r.rep == rep)
                    .copied()
                    .ok_or_else(|| {
                        Error::Contract(format!("ranking needs every method in repetition {rep}"))
                    })
            })
            .collect::<Result<_>>()?;
        by_rep.push(row);
    }

    let mut per_method_ranks: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::with_capacity(by_rep.len()); iters]; order.len()];
    for row in &by_rep {
        for i in 0..iters {
            let vals: Vec<f64> = row.iter().map(|r| r.iterations[i].cum_max).collect();
            let ranks = average_ranks(&vals);
            for (m, rank) in ranks.into_iter().enumerate() {
                per_method_ranks[m][i].push(rank);
            }
        }
    }
    Ok(order
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let mut mean = Vec::with_capacity(iters);
            let mut std = Vec::with_capacity(iters);
            for i in 0..iters {
                let (mu, sd) = mean_std(&per_method_ranks[m][i]);
                mean.push(mu);
                std.push(sd);
            }
            MethodCurve { method: name.to_string(), mean, std }
        })
        .collect())
}
