//! The optimization loops: generate source-task evaluation histories, then
//! run every method against fresh target draws over repeated seeds.
//!
//! Within a repetition all methods share the same target draw and the same
//! source histories; only the per-method random streams differ. Iteration
//! numbering is 1-based and counts initialization evaluations. Repetitions
//! run in parallel and share nothing; methods within a repetition run
//! sequentially.

use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acquisition::{
    best_theta_per_task, propose_next, random_proposal, warm_start_select, HyperparameterSpace,
};
use crate::diffkit::params::ParamSet;
use crate::embeddings::{rescale_sample_size, DatasetKind, EmbeddingConfig, TaskVector};
use crate::error::{Error, Result};
use crate::metafeatures::{
    l2_similarity, normalize_across_tasks, task_metafeatures, unsupervised_manual_features,
};
use crate::surrogates::{fit_surrogate, FitConfig, SurrogateKind, TaskRecord};

use super::persist::{self, HistoryRecord};
use super::tasks::{ExperimentWorld, TaskInstance};
use super::{
    derive_seed, Family, IterationRecord, Method, RunEvent, RunResult, EVAL_RETRIES,
    WARM_PER_TASK, WARM_TASKS,
};

/// Knobs that live outside the experiment config: parallelism and where
/// source histories are cached.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for repetitions; 0 uses the rayon default.
    pub threads: usize,
}

struct Chosen {
    theta: Vec<f64>,
    rule: String,
}

fn random_chosen(space: &HyperparameterSpace, rng: &mut impl Rng) -> Chosen {
    let p = random_proposal(space, rng, false);
    Chosen { theta: p.theta, rule: p.rule.name().to_string() }
}

fn fit_config(
    world: &ExperimentWorld,
    kind: SurrogateKind,
    target: usize,
    embedding: Option<EmbeddingConfig>,
    seed: u64,
) -> FitConfig {
    let knobs = &world.cfg.fit;
    FitConfig {
        kind,
        target,
        embedding,
        batch_size: knobs.batch_size,
        max_steps: knobs.max_steps,
        warm_steps: knobs.warm_steps,
        feature_width: knobs.feature_width,
        seed,
    }
}

/// Optimize one source task: a uniform random phase, then model-guided
/// proposals from a surrogate fitted to the task's own history.
fn generate_one_source(world: &ExperimentWorld, task: usize) -> Result<Vec<HistoryRecord>> {
    let inst = &world.sources[task];
    let budget = &world.cfg.budget;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(world.cfg.base_seed, "srcopt", task as u64));
    let mut space = world.space.clone();
    space.set_standardization_uniform();
    let mut objective = inst.objective.clone();
    let mut record = TaskRecord::new(
        inst.data.clone(),
        inst.sample_size,
        rescale_sample_size(inst.sample_size, world.max_sample_size),
    );
    let mut prev: Option<ParamSet> = None;
    let mut out = Vec::with_capacity(budget.source_total());
    for iter in 1..=budget.source_total() {
        let mut chosen = if iter <= budget.source_random || record.history.is_empty() {
            random_chosen(&space, &mut rng)
        } else {
            let cfg = fit_config(
                world,
                SurrogateKind::PlainGP,
                0,
                None,
                derive_seed(world.cfg.base_seed, "srcfit", (task * 100_000 + iter) as u64),
            );
            match fit_surrogate(std::slice::from_ref(&record), &cfg, prev.as_ref()) {
                Ok(fit) => {
                    prev = Some(fit.params.clone());
                    match propose_next(
                        &fit,
                        &space,
                        &record.history,
                        &[],
                        &world.cfg.acquisition,
                        iter,
                        &mut rng,
                    ) {
                        Ok(p) => Chosen { theta: p.theta, rule: p.rule.name().to_string() },
                        Err(_) => random_chosen(&space, &mut rng),
                    }
                }
                Err(_) => {
                    prev = None;
                    random_chosen(&space, &mut rng)
                }
            }
        };
        let mut z = None;
        for _ in 0..EVAL_RETRIES {
            match objective.eval(&chosen.theta) {
                Ok(v) if v.is_finite() => {
                    z = Some(v);
                    break;
                }
                _ => chosen = random_chosen(&space, &mut rng),
            }
        }
        let Some(z) = z else {
            return Err(Error::Evaluation(format!(
                "source task {task}: objective failed {EVAL_RETRIES} times at iteration {iter}"
            )));
        };
        record.push_eval(space.transform(&chosen.theta).0, z);
        out.push(HistoryRecord { task, iteration: iter, theta: chosen.theta, z, rule: chosen.rule });
    }
    Ok(out)
}

/// Generate evaluation histories for every source task, in parallel.
/// Deterministic in the base seed alone; the experiment kind's target
/// settings never enter, so sibling experiments over the same sources
/// share histories exactly.
pub fn generate_source_evaluations(world: &ExperimentWorld) -> Result<Vec<HistoryRecord>> {
    let per_task: Vec<Vec<HistoryRecord>> = (0..world.sources.len())
        .into_par_iter()
        .map(|task| generate_one_source(world, task))
        .collect::<Result<_>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

/// Load persisted source histories, or generate and persist them.
pub fn ensure_sources(world: &ExperimentWorld, path: &Path) -> Result<Vec<Vec<(Vec<f64>, f64)>>> {
    let records = if path.exists() {
        persist::load_history(path)?
    } else {
        let records = generate_source_evaluations(world)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        persist::persist_history(path, &records)?;
        records
    };
    persist::group_source_histories(&records, world.sources.len())
}

/// Frozen handcrafted task descriptions for one repetition: sources first,
/// target last.
struct ManualBundle {
    /// Complete per-task vectors: min-max normalized meta-features with
    /// rescaled sample size and class ratios appended.
    vectors: Vec<Vec<f64>>,
    /// Similarity of each source to the target on the normalized
    /// meta-features alone.
    init_similarities: Vec<f64>,
}

fn manual_raw(data: &crate::embeddings::Dataset, seed: u64) -> Result<Vec<f64>> {
    if data.kind == DatasetKind::Unsupervised {
        Ok(unsupervised_manual_features(data))
    } else {
        task_metafeatures(data, seed)
    }
}

fn build_manual_bundle(
    world: &ExperimentWorld,
    target: &TaskInstance,
    rep_seed: u64,
) -> Result<ManualBundle> {
    let n = world.sources.len();
    let mut raws = Vec::with_capacity(n + 1);
    for (i, inst) in world.sources.iter().enumerate() {
        raws.push(manual_raw(&inst.data, derive_seed(world.cfg.base_seed, "meta", i as u64))?);
    }
    raws.push(manual_raw(&target.data, derive_seed(rep_seed, "meta", n as u64))?);
    let normalized = normalize_across_tasks(&raws);
    let init_similarities =
        normalized[..n].iter().map(|v| l2_similarity(&normalized[n], v)).collect();
    let instances = world.sources.iter().chain(std::iter::once(target));
    let vectors = instances
        .zip(&normalized)
        .map(|(inst, nv)| {
            let tv = TaskVector::assemble(
                &Array1::from_vec(nv.clone()),
                rescale_sample_size(inst.sample_size, world.max_sample_size),
                &inst.data.class_ratios(),
            )?;
            Ok(tv.values.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ManualBundle { vectors, init_similarities })
}

struct MethodState {
    space: HyperparameterSpace,
    records: Vec<TaskRecord>,
    target_idx: usize,
    /// Best native θ of each nonempty source history, for the first
    /// model-guided iteration of the feature-regression kinds.
    source_best: Vec<Vec<f64>>,
    /// Native warm-start evaluations, most similar task first.
    warm: Vec<Vec<f64>>,
    embedding: Option<EmbeddingConfig>,
}

fn setup_method(
    world: &ExperimentWorld,
    sources_native: &[Vec<(Vec<f64>, f64)>],
    target: &TaskInstance,
    bundle: Option<&ManualBundle>,
    method: Method,
) -> Result<MethodState> {
    let mut space = world.space.clone();
    let use_sources = method.uses_sources() && !sources_native.is_empty();
    if use_sources {
        let pooled: Vec<Vec<f64>> = sources_native
            .iter()
            .flat_map(|h| h.iter().map(|(theta, _)| theta.clone()))
            .collect();
        space.set_standardization(&pooled)?;
    } else {
        space.set_standardization_uniform();
    }

    let needs_vectors = method.surrogate().is_some_and(SurrogateKind::uses_manual_vectors);
    let rescaled = |s: usize| rescale_sample_size(s, world.max_sample_size);
    let mut records = Vec::new();
    let target_idx = match method.family() {
        Family::Transfer | Family::MultiTask => {
            for (i, (inst, hist)) in world.sources.iter().zip(sources_native).enumerate() {
                let mut rec =
                    TaskRecord::new(inst.data.clone(), inst.sample_size, rescaled(inst.sample_size));
                if needs_vectors {
                    rec.manual_vector =
                        Some(bundle.expect("manual methods build the bundle").vectors[i].clone());
                }
                for (theta, z) in hist {
                    rec.push_eval(space.transform(theta).0, *z);
                }
                records.push(rec);
            }
            let mut rec =
                TaskRecord::new(target.data.clone(), target.sample_size, rescaled(target.sample_size));
            if needs_vectors {
                rec.manual_vector = Some(
                    bundle.expect("manual methods build the bundle").vectors[world.sources.len()]
                        .clone(),
                );
            }
            records.push(rec);
            records.len() - 1
        }
        _ => {
            records.push(TaskRecord::new(
                target.data.clone(),
                target.sample_size,
                rescaled(target.sample_size),
            ));
            0
        }
    };

    let histories: Vec<&[(Vec<f64>, f64)]> =
        sources_native.iter().map(Vec::as_slice).collect();
    let source_best = if method.family() == Family::Transfer {
        best_theta_per_task(&histories)
    } else {
        Vec::new()
    };
    let warm = if method.family() == Family::WarmStart {
        let b = bundle.ok_or_else(|| {
            Error::Contract("warm-started methods need the meta-feature bundle".into())
        })?;
        let m_tasks = WARM_TASKS.min(histories.len());
        warm_start_select(&b.init_similarities, &histories, m_tasks, WARM_PER_TASK)?.thetas
    } else {
        Vec::new()
    };
    let embedding = if method.surrogate().is_some_and(SurrogateKind::uses_embeddings) {
        Some(world.cfg.embedding.resolve(target.data.kind))
    } else {
        None
    };
    Ok(MethodState { space, records, target_idx, source_best, warm, embedding })
}

/// Run one method against one target draw. Never panics on objective or
/// fit trouble: recoverable problems become events plus random fallbacks,
/// and only an iteration whose evaluation budget is exhausted marks the
/// run as failed.
fn run_method(
    world: &ExperimentWorld,
    sources_native: &[Vec<(Vec<f64>, f64)>],
    target: &TaskInstance,
    bundle: Option<&ManualBundle>,
    method: Method,
    rep: usize,
    rep_seed: u64,
) -> RunResult {
    let start = Instant::now();
    let method_seed = derive_seed(rep_seed, method.name(), 0);
    let mut result = RunResult {
        method: method.name().to_string(),
        rep,
        seed: method_seed,
        iterations: Vec::new(),
        events: Vec::new(),
        failed: None,
        wall_ms: 0,
        max_fit_ms: 0,
    };
    let mut state = match setup_method(world, sources_native, target, bundle, method) {
        Ok(s) => s,
        Err(e) => {
            result.failed = Some(e.to_string());
            result.wall_ms = start.elapsed().as_millis() as u64;
            return result;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(method_seed);
    let mut objective = target.objective.clone();
    let mut prev: Option<ParamSet> = None;
    let mut cum = f64::NEG_INFINITY;
    let total = world.cfg.budget.target_total();

    for iter in 1..=total {
        let random_phase = match method.family() {
            Family::Random => true,
            Family::TargetOnly => iter <= world.cfg.budget.target_random,
            Family::MultiTask => iter == 1,
            Family::Transfer => false,
            Family::WarmStart => false,
        };
        let warm_phase = method.family() == Family::WarmStart && iter <= state.warm.len();
        let kind = method.surrogate();
        let can_fit = kind.is_some_and(|k| {
            !(k.target_only() && state.records[state.target_idx].history.is_empty())
        });

        let (mut chosen, similarities) = if random_phase || warm_phase || !can_fit {
            let chosen = if warm_phase {
                Chosen { theta: state.warm[iter - 1].clone(), rule: "warm_start".to_string() }
            } else {
                random_chosen(&state.space, &mut rng)
            };
            (chosen, None)
        } else {
            let kind = kind.expect("can_fit implies a surrogate");
            let cfg = fit_config(
                world,
                kind,
                state.target_idx,
                state.embedding.clone(),
                derive_seed(method_seed, "fit", iter as u64),
            );
            let t0 = Instant::now();
            let fitted = fit_surrogate(&state.records, &cfg, prev.as_ref());
            result.max_fit_ms = result.max_fit_ms.max(t0.elapsed().as_millis() as u64);
            match fitted {
                Ok(fit) => {
                    prev = Some(fit.params.clone());
                    let sims = fit
                        .task_similarities()
                        .map(|v| v[..world.sources.len().min(v.len())].to_vec());
                    let proposal = propose_next(
                        &fit,
                        &state.space,
                        &state.records[state.target_idx].history,
                        &state.source_best,
                        &world.cfg.acquisition,
                        iter,
                        &mut rng,
                    );
                    match proposal {
                        Ok(p) => {
                            if p.numeric_fallback {
                                result.events.push(RunEvent {
                                    iteration: iter,
                                    kind: "proposal".into(),
                                    detail: "posterior failed numerically; random fallback".into(),
                                });
                            }
                            (Chosen { theta: p.theta, rule: p.rule.name().to_string() }, sims)
                        }
                        Err(e) => {
                            result.events.push(RunEvent {
                                iteration: iter,
                                kind: "proposal".into(),
                                detail: e.to_string(),
                            });
                            (random_chosen(&state.space, &mut rng), sims)
                        }
                    }
                }
                Err(e) => {
                    result.events.push(RunEvent {
                        iteration: iter,
                        kind: "fit".into(),
                        detail: e.to_string(),
                    });
                    prev = None;
                    (random_chosen(&state.space, &mut rng), None)
                }
            }
        };

        let mut z = None;
        for attempt in 0..EVAL_RETRIES {
            match objective.eval(&chosen.theta) {
                Ok(v) if v.is_finite() => {
                    z = Some(v);
                    break;
                }
                Ok(v) => result.events.push(RunEvent {
                    iteration: iter,
                    kind: "evaluation".into(),
                    detail: format!("non-finite objective value {v}"),
                }),
                Err(e) => result.events.push(RunEvent {
                    iteration: iter,
                    kind: "evaluation".into(),
                    detail: e.to_string(),
                }),
            }
            if attempt + 1 < EVAL_RETRIES {
                chosen = random_chosen(&state.space, &mut rng);
            }
        }
        let Some(z) = z else {
            result.failed = Some(format!(
                "objective failed {EVAL_RETRIES} times at iteration {iter}"
            ));
            break;
        };
        cum = cum.max(z);
        state.records[state.target_idx].push_eval(state.space.transform(&chosen.theta).0, z);
        result.iterations.push(IterationRecord {
            iteration: iter,
            theta: chosen.theta,
            z,
            cum_max: cum,
            rule: chosen.rule,
            similarities,
        });
    }
    result.wall_ms = start.elapsed().as_millis() as u64;
    result
}

fn run_repetition(
    world: &ExperimentWorld,
    sources_native: &[Vec<(Vec<f64>, f64)>],
    rep: usize,
) -> Result<Vec<RunResult>> {
    let rep_seed = derive_seed(world.cfg.base_seed, "rep", rep as u64);
    let target = world.draw_target(rep_seed)?;
    let bundle = if world.cfg.methods.iter().any(|m| m.needs_manual_features()) {
        Some(build_manual_bundle(world, &target, rep_seed)?)
    } else {
        None
    };
    Ok(world
        .cfg
        .methods
        .iter()
        .map(|&m| run_method(world, sources_native, &target, bundle.as_ref(), m, rep, rep_seed))
        .collect())
}

/// Run the configured methods over all repetitions. Results come back
/// ordered by repetition, then by the configured method order.
pub fn run_experiment(
    world: &ExperimentWorld,
    sources_native: &[Vec<(Vec<f64>, f64)>],
    opts: &RunOptions,
) -> Result<Vec<RunResult>> {
    if sources_native.len() != world.sources.len() {
        return Err(Error::Contract(format!(
            "{} source histories for {} source tasks",
            sources_native.len(),
            world.sources.len()
        )));
    }
    let reps: Vec<usize> = (0..world.cfg.repetitions).collect();
    let run_all = || -> Result<Vec<Vec<RunResult>>> {
        reps.par_iter().map(|&rep| run_repetition(world, sources_native, rep)).collect()
    };
    let nested = if opts.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run_all)?
    } else {
        run_all()?
    };
    Ok(nested.into_iter().flatten().collect())
}
