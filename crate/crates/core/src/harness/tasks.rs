//! World construction: the search space, the source tasks with their
//! objectives, and fresh target draws per repetition.

use std::fmt;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{Dimension, HyperparameterSpace};
use crate::embeddings::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::taskgen::{
    gen_counterexample_task, gen_rff_logistic_task, gen_toy_task, kernel_logistic_eval,
    kernel_ridge_eval, load_csv_dataset, toy_objective, CsvSchema, ExternalObjective,
    COUNTEREXAMPLE_DIMS,
};

use super::{derive_seed, CsvParams, ExperimentConfig, ExperimentKind};

/// Bandwidth pool the random-feature source tasks draw from, one choice
/// per dimension with replacement.
pub const RFF_BANDWIDTH_CHOICES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// Dimensionality of the random-feature classification inputs.
pub const RFF_DIMS: usize = 6;
/// Bandwidth of every dimension of the off-distribution target variant.
pub const RFF_SHIFTED_BANDWIDTH: f64 = 1.5;

/// A callable objective, owning whatever raw data it needs.
pub enum ObjectiveImpl {
    /// exp(−(θ − x̄)²/2) against the raw sample mean.
    Toy { data: Dataset },
    /// Kernel ridge regression R² on a held-out split; θ = [α, σ₁..σₚ].
    Ridge { train: Dataset, test: Dataset },
    /// Kernel logistic regression AUC on a held-out split; θ = [C, σ₁..σₚ].
    Logistic { train: Dataset, test: Dataset },
    /// Line-JSON subprocess; spawned lazily and respawned after any failure.
    External { command: String, timeout: Duration, runner: Option<ExternalObjective> },
}

impl ObjectiveImpl {
    pub fn eval(&mut self, theta: &[f64]) -> Result<f64> {
        match self {
            ObjectiveImpl::Toy { data } => {
                if theta.len() != 1 {
                    return Err(Error::Contract(format!(
                        "toy objective takes one hyperparameter, got {}",
                        theta.len()
                    )));
                }
                Ok(toy_objective(theta[0], data))
            }
            ObjectiveImpl::Ridge { train, test } => {
                kernel_ridge_eval(train, test, theta[0], &theta[1..])
            }
            ObjectiveImpl::Logistic { train, test } => {
                kernel_logistic_eval(train, test, theta[0], &theta[1..])
            }
            ObjectiveImpl::External { command, timeout, runner } => {
                if runner.is_none() {
                    *runner = Some(ExternalObjective::spawn(command, *timeout)?);
                }
                match runner.as_mut().expect("just spawned").eval(theta) {
                    Ok(z) => Ok(z),
                    Err(e) => {
                        *runner = None;
                        Err(e)
                    }
                }
            }
        }
    }
}

impl Clone for ObjectiveImpl {
    fn clone(&self) -> Self {
        match self {
            ObjectiveImpl::Toy { data } => ObjectiveImpl::Toy { data: data.clone() },
            ObjectiveImpl::Ridge { train, test } => {
                ObjectiveImpl::Ridge { train: train.clone(), test: test.clone() }
            }
            ObjectiveImpl::Logistic { train, test } => {
                ObjectiveImpl::Logistic { train: train.clone(), test: test.clone() }
            }
            // Subprocess handles are per-run; clones respawn on first use.
            ObjectiveImpl::External { command, timeout, .. } => ObjectiveImpl::External {
                command: command.clone(),
                timeout: *timeout,
                runner: None,
            },
        }
    }
}

impl fmt::Debug for ObjectiveImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveImpl::Toy { data } => write!(f, "Toy(s={})", data.len()),
            ObjectiveImpl::Ridge { train, test } => {
                write!(f, "Ridge(train={}, test={})", train.len(), test.len())
            }
            ObjectiveImpl::Logistic { train, test } => {
                write!(f, "Logistic(train={}, test={})", train.len(), test.len())
            }
            ObjectiveImpl::External { command, .. } => write!(f, "External({command:?})"),
        }
    }
}

/// One task as the harness sees it: the summary view of its training data
/// (what embeddings and meta-features consume) plus its objective.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub data: Dataset,
    pub sample_size: usize,
    pub objective: ObjectiveImpl,
}

/// Everything fixed across repetitions: the search box (standardization
/// left at identity; runs estimate it per method), the source tasks, and
/// the latent knobs needed to draw targets.
#[derive(Clone, Debug)]
pub struct ExperimentWorld {
    pub cfg: ExperimentConfig,
    pub space: HyperparameterSpace,
    pub sources: Vec<TaskInstance>,
    /// Per-source kernel bandwidths; random-feature experiments only.
    pub source_bandwidths: Vec<Vec<f64>>,
    /// Largest training-sample size across sources and target.
    pub max_sample_size: usize,
}

fn toy_space() -> Result<HyperparameterSpace> {
    HyperparameterSpace::new(vec![Dimension::linear("theta", -8.0, 8.0)])
}

fn counter_space() -> Result<HyperparameterSpace> {
    let mut dims = vec![Dimension::log("alpha", 1e-8, 0.1)];
    for j in 0..COUNTEREXAMPLE_DIMS {
        dims.push(Dimension::log(&format!("sigma{}", j + 1), 2f64.powi(-7), 2f64.powi(5)));
    }
    HyperparameterSpace::new(dims)
}

fn rff_space() -> Result<HyperparameterSpace> {
    let mut dims = vec![Dimension::log("c", 2f64.powi(-7), 2f64.powi(10))];
    for j in 0..RFF_DIMS {
        dims.push(Dimension::log(&format!("sigma{}", j + 1), 2f64.powi(-3), 2f64.powi(5)));
    }
    HyperparameterSpace::new(dims)
}

fn csv_space(params: &CsvParams, n_features: usize) -> Result<HyperparameterSpace> {
    let (reg_default, bw_default, reg_name) = match params.data_kind {
        DatasetKind::Regression => ((1e-8, 0.1), (2f64.powi(-7), 2f64.powi(5)), "alpha"),
        DatasetKind::Classification => ((2f64.powi(-7), 2f64.powi(10)), (2f64.powi(-3), 2f64.powi(5)), "c"),
        DatasetKind::Unsupervised => {
            return Err(Error::Config("csv tasks need labels".into()));
        }
    };
    let (reg_lo, reg_hi) = params.reg_range.unwrap_or(reg_default);
    let (bw_lo, bw_hi) = params.bandwidth_range.unwrap_or(bw_default);
    let mut dims = vec![Dimension::log(reg_name, reg_lo, reg_hi)];
    for j in 0..n_features {
        dims.push(Dimension::log(&format!("sigma{}", j + 1), bw_lo, bw_hi));
    }
    HyperparameterSpace::new(dims)
}

fn csv_schema(params: &CsvParams) -> CsvSchema {
    CsvSchema {
        label_column: params.label_column.clone(),
        kind: params.data_kind,
        delimiter: params.delimiter,
    }
}

fn csv_objective(params: &CsvParams, train: Dataset, test: Dataset) -> ObjectiveImpl {
    match params.data_kind {
        DatasetKind::Classification => ObjectiveImpl::Logistic { train, test },
        _ => ObjectiveImpl::Ridge { train, test },
    }
}

fn draw_rff_bandwidths(rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..RFF_DIMS).map(|_| RFF_BANDWIDTH_CHOICES[rng.gen_range(0..RFF_BANDWIDTH_CHOICES.len())]).collect()
}

/// Build the fixed part of an experiment: space, sources, size bookkeeping.
/// Source draws are seeded from the base seed alone, so every repetition
/// and method sees identical source tasks.
pub fn build_world(cfg: &ExperimentConfig) -> Result<ExperimentWorld> {
    cfg.validate()?;
    let base = cfg.base_seed;
    let mut sources = Vec::new();
    let mut source_bandwidths = Vec::new();
    let space;
    let mut target_size;

    match cfg.kind {
        ExperimentKind::Toy => {
            let p = cfg.toy.as_ref().expect("validated");
            space = toy_space()?;
            target_size = p.sample_size;
            for (i, &gamma) in p.source_gammas.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, "src", i as u64));
                let task = gen_toy_task(gamma, p.sample_size, &mut rng)?;
                sources.push(TaskInstance {
                    data: task.data.normalized(),
                    sample_size: p.sample_size,
                    objective: ObjectiveImpl::Toy { data: task.data },
                });
            }
        }
        ExperimentKind::Counterexample => {
            let p = cfg.counter.as_ref().expect("validated");
            space = counter_space()?;
            target_size = p.sample_size;
            for process in 1..=4usize {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(base, "src", process as u64 - 1));
                let train = gen_counterexample_task(process, p.sample_size, &mut rng)?;
                let test = gen_counterexample_task(process, p.sample_size, &mut rng)?;
                sources.push(TaskInstance {
                    data: train.normalized(),
                    sample_size: p.sample_size,
                    objective: ObjectiveImpl::Ridge { train, test },
                });
            }
        }
        ExperimentKind::RffA | ExperimentKind::RffB => {
            let p = cfg.rff.as_ref().expect("validated");
            space = rff_space()?;
            target_size = p.sample_size;
            for i in 0..p.n_sources {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, "src", i as u64));
                let bandwidths = draw_rff_bandwidths(&mut rng);
                let task = gen_rff_logistic_task(&bandwidths, p.sample_size, &mut rng)?;
                source_bandwidths.push(bandwidths);
                sources.push(TaskInstance {
                    data: task.train.normalized(),
                    sample_size: task.train.len(),
                    objective: ObjectiveImpl::Logistic { train: task.train, test: task.test },
                });
            }
        }
        ExperimentKind::Csv => {
            let p = cfg.csv.as_ref().expect("validated");
            let schema = csv_schema(p);
            let mut n_features = None;
            for (i, path) in p.paths.iter().enumerate() {
                if i == p.target {
                    continue;
                }
                let loaded = load_csv_dataset(path, &schema, derive_seed(base, "src", i as u64))?;
                n_features.get_or_insert(loaded.train.dim());
                if loaded.train.dim() != n_features.expect("just set") {
                    return Err(Error::Config(format!(
                        "{}: {} feature columns, other tasks have {}",
                        path.display(),
                        loaded.train.dim(),
                        n_features.expect("just set")
                    )));
                }
                sources.push(TaskInstance {
                    data: loaded.train.normalized(),
                    sample_size: loaded.train.len(),
                    objective: csv_objective(p, loaded.train, loaded.test),
                });
            }
            // Probe the target file for its dimensionality and split size;
            // the split fraction fixes the train length regardless of seed.
            let probe = load_csv_dataset(&p.paths[p.target], &schema, 0)?;
            if probe.train.dim() != n_features.unwrap_or(probe.train.dim()) {
                return Err(Error::Config(format!(
                    "{}: {} feature columns, sources have {}",
                    p.paths[p.target].display(),
                    probe.train.dim(),
                    n_features.expect("at least one source")
                )));
            }
            target_size = probe.train.len();
            space = csv_space(p, probe.train.dim())?;
        }
        ExperimentKind::External => {
            let p = cfg.external.as_ref().expect("validated");
            space = HyperparameterSpace::new(p.dims.clone())?;
            target_size = 1;
        }
    }

    if target_size == 0 {
        target_size = 1;
    }
    let max_sample_size =
        sources.iter().map(|t| t.sample_size).chain(std::iter::once(target_size)).max().expect("nonempty");
    Ok(ExperimentWorld { cfg: cfg.clone(), space, sources, source_bandwidths, max_sample_size })
}

impl ExperimentWorld {
    /// Draw the repetition's target task. Seeded only by `rep_seed`, so all
    /// methods within a repetition optimize the same draw.
    pub fn draw_target(&self, rep_seed: u64) -> Result<TaskInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "target", 0));
        match self.cfg.kind {
            ExperimentKind::Toy => {
                let p = self.cfg.toy.as_ref().expect("validated");
                let task = gen_toy_task(p.target_gamma, p.sample_size, &mut rng)?;
                Ok(TaskInstance {
                    data: task.data.normalized(),
                    sample_size: p.sample_size,
                    objective: ObjectiveImpl::Toy { data: task.data },
                })
            }
            ExperimentKind::Counterexample => {
                let p = self.cfg.counter.as_ref().expect("validated");
                let train = gen_counterexample_task(2, p.sample_size, &mut rng)?;
                let test = gen_counterexample_task(2, p.sample_size, &mut rng)?;
                Ok(TaskInstance {
                    data: train.normalized(),
                    sample_size: p.sample_size,
                    objective: ObjectiveImpl::Ridge { train, test },
                })
            }
            ExperimentKind::RffA | ExperimentKind::RffB => {
                let p = self.cfg.rff.as_ref().expect("validated");
                let bandwidths = if self.cfg.kind == ExperimentKind::RffA {
                    self.source_bandwidths[0].clone()
                } else {
                    vec![RFF_SHIFTED_BANDWIDTH; RFF_DIMS]
                };
                let task = gen_rff_logistic_task(&bandwidths, p.sample_size, &mut rng)?;
                Ok(TaskInstance {
                    data: task.train.normalized(),
                    sample_size: task.train.len(),
                    objective: ObjectiveImpl::Logistic { train: task.train, test: task.test },
                })
            }
            ExperimentKind::Csv => {
                let p = self.cfg.csv.as_ref().expect("validated");
                let loaded = load_csv_dataset(
                    &p.paths[p.target],
                    &csv_schema(p),
                    derive_seed(rep_seed, "target", 0),
                )?;
                Ok(TaskInstance {
                    data: loaded.train.normalized(),
                    sample_size: loaded.train.len(),
                    objective: csv_objective(p, loaded.train, loaded.test),
                })
            }
            ExperimentKind::External => {
                let p = self.cfg.external.as_ref().expect("validated");
                Ok(TaskInstance {
                    data: Dataset::unsupervised(ndarray::Array2::zeros((1, 1)))?,
                    sample_size: 1,
                    objective: ObjectiveImpl::External {
                        command: p.command.clone(),
                        timeout: Duration::from_secs_f64(p.timeout_secs),
                        runner: None,
                    },
                })
            }
        }
    }
}
