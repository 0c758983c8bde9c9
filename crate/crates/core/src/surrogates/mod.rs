//! Joint surrogate models of accuracy as a function of hyperparameters,
//! data distribution and sample size.
//!
//! Two model families share one fitting loop: a GP whose covariance is a
//! product of Matern-3/2 kernels over hyperparameters and task vectors, and
//! a Bayesian linear regression over learned neural features of the
//! concatenated inputs. Each family comes in four flavors that differ only
//! in where the task vector comes from: learned distribution embeddings
//! (`Dist*`), frozen meta-feature vectors (`Manual*`), a free similarity
//! learned per task pair (`MultiGP`) or a one-hot task code (`MultiBLR`),
//! and no task information at all (`Plain*`, target observations only).
//!
//! All parameters, including embedding network weights, train jointly by
//! maximizing the exact log marginal likelihood with ADAM. Embeddings see a
//! fresh minibatch each step; posteriors are computed with full-sample
//! (capped, deterministic) embeddings.

pub mod blr;
pub mod gp;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::adam::{AdamConfig, AdamState, ConvergenceWindow};
use crate::diffkit::params::ParamSet;
use crate::diffkit::{Bindings, Graph, NodeId};
use crate::embeddings::{
    embed_query, init_embedding_params, minibatch_indices, one_hot, Dataset,
    EmbeddingConfig, TaskVector, DEFAULT_BATCH,
};
use crate::error::{Error, Result};

/// Optimizer step budget for a fit from random initialization.
pub const MAX_FIT_STEPS: usize = 2000;
/// Step budget when refitting from a previous optimum on grown data.
pub const WARM_FIT_STEPS: usize = 200;
/// Random re-initializations before a numeric failure becomes a fit failure.
const FIT_ATTEMPTS: usize = 3;
/// Width of the three-layer feature map in the BLR family.
pub const BLR_FEATURE_DIM: usize = 50;

/// One hyperparameter evaluation: standardized location, owning task, and
/// the observed accuracy.
#[derive(Clone, Debug)]
pub struct Observation {
    pub theta_std: Vec<f64>,
    pub task: usize,
    pub z: f64,
}

/// A task as the surrogates see it: its (normalized) dataset, size
/// bookkeeping, an optional frozen meta-feature task vector, and the
/// evaluations observed so far.
#[derive(Clone, Debug)]
pub struct TaskRecord {
    pub data: Dataset,
    pub sample_size: usize,
    /// Sample size divided by the largest task's, clamped to (0, 1].
    pub rescaled_size: f64,
    /// Complete frozen task vector for the manual kinds, already normalized
    /// across tasks and with rescaled size (and class ratios) appended.
    pub manual_vector: Option<Vec<f64>>,
    /// Evaluation history as (standardized theta, accuracy) pairs.
    pub history: Vec<(Vec<f64>, f64)>,
}

impl TaskRecord {
    pub fn new(data: Dataset, sample_size: usize, rescaled_size: f64) -> Self {
        TaskRecord { data, sample_size, rescaled_size, manual_vector: None, history: Vec::new() }
    }

    pub fn push_eval(&mut self, theta_std: Vec<f64>, z: f64) {
        self.history.push((theta_std, z));
    }
}

/// The eight surrogate variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SurrogateKind {
    DistGP,
    DistBLR,
    ManualGP,
    ManualBLR,
    MultiGP,
    MultiBLR,
    PlainGP,
    PlainBLR,
}

impl SurrogateKind {
    pub fn is_gp(self) -> bool {
        matches!(self, Self::DistGP | Self::ManualGP | Self::MultiGP | Self::PlainGP)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, Self::DistGP | Self::DistBLR)
    }

    pub fn uses_manual_vectors(self) -> bool {
        matches!(self, Self::ManualGP | Self::ManualBLR)
    }

    /// Plain kinds model the target task alone.
    pub fn target_only(self) -> bool {
        matches!(self, Self::PlainGP | Self::PlainBLR)
    }
}

/// Everything a fit needs besides the tasks themselves.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub kind: SurrogateKind,
    /// Index of the target task within the task slice.
    pub target: usize,
    /// Embedding recipe for the dist kinds; when `None` it defaults to the
    /// standard recipe for the target dataset's kind.
    pub embedding: Option<EmbeddingConfig>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warm_steps: usize,
    /// Width of the BLR feature map; tests shrink it, fits keep the default.
    pub feature_width: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(kind: SurrogateKind, target: usize, seed: u64) -> Self {
        FitConfig {
            kind,
            target,
            embedding: None,
            batch_size: DEFAULT_BATCH,
            max_steps: MAX_FIT_STEPS,
            warm_steps: WARM_FIT_STEPS,
            feature_width: BLR_FEATURE_DIM,
            seed,
        }
    }

    fn resolve_embedding(&self, tasks: &[TaskRecord]) -> Option<EmbeddingConfig> {
        if !self.kind.uses_embeddings() {
            return None;
        }
        Some(
            self.embedding
                .clone()
                .unwrap_or_else(|| EmbeddingConfig::for_kind(tasks[self.target].data.kind)),
        )
    }
}

/// Observations pooled across tasks in task order, plus the lookup tables
/// the kernel builders need.
pub struct PooledObservations {
    pub obs: Vec<Observation>,
    pub theta: Array2<f64>,
    pub z: Array2<f64>,
    pub theta_dim: usize,
    pub n_tasks: usize,
    /// One-hot task membership, N x n_tasks.
    pub membership: Array2<f64>,
}

/// Pool evaluation histories. Plain kinds see only the target task and get
/// a single-task pool (membership all ones).
pub fn pool_observations(tasks: &[TaskRecord], cfg: &FitConfig) -> Result<PooledObservations> {
    if cfg.target >= tasks.len() {
        return Err(Error::Contract(format!(
            "target index {} out of range for {} tasks",
            cfg.target,
            tasks.len()
        )));
    }
    let mut obs = Vec::new();
    if cfg.kind.target_only() {
        for (theta, z) in &tasks[cfg.target].history {
            obs.push(Observation { theta_std: theta.clone(), task: 0, z: *z });
        }
    } else {
        for (t, task) in tasks.iter().enumerate() {
            for (theta, z) in &task.history {
                obs.push(Observation { theta_std: theta.clone(), task: t, z: *z });
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::Contract("fitting needs at least one observation".into()));
    }
    let theta_dim = obs[0].theta_std.len();
    if theta_dim == 0 {
        return Err(Error::Contract("observations need at least one hyperparameter".into()));
    }
    for o in &obs {
        if o.theta_std.len() != theta_dim {
            return Err(Error::Contract(format!(
                "inconsistent hyperparameter dimensions: {} vs {theta_dim}",
                o.theta_std.len()
            )));
        }
        if o.theta_std.iter().any(|v| !v.is_finite()) || !o.z.is_finite() {
            return Err(Error::Contract("observations must be finite".into()));
        }
    }
    let n_tasks = if cfg.kind.target_only() { 1 } else { tasks.len() };
    let n = obs.len();
    let mut theta = Array2::zeros((n, theta_dim));
    let mut z = Array2::zeros((n, 1));
    let mut membership = Array2::zeros((n, n_tasks));
    for (i, o) in obs.iter().enumerate() {
        for (j, v) in o.theta_std.iter().enumerate() {
            theta[[i, j]] = *v;
        }
        z[[i, 0]] = o.z;
        membership[[i, o.task]] = 1.0;
    }
    Ok(PooledObservations { obs, theta, z, theta_dim, n_tasks, membership })
}

/// Elementwise-softplus lower-triangular factor and the induced task
/// similarity matrix S = L L^T. Raw entries above the diagonal are ignored.
pub fn task_similarity(l_raw: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = l_raw.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            l[[i, j]] = crate::diffkit::softplus(l_raw[[i, j]]);
        }
    }
    let s = l.dot(&l.t());
    (l, s)
}

/// A numbered minibatch slot: which task's dataset feeds the inputs under
/// `prefix`, and how many rows the graph expects.
struct BatchSlot {
    task: usize,
    prefix: String,
    rows: usize,
    /// Whether fresh indices are drawn every step (dataset larger than the
    /// batch) or the full set is bound once.
    redraw: bool,
}

/// A built log-marginal-likelihood graph with its static bindings, ready
/// for repeated evaluation while parameters and minibatches change.
pub struct LmlProblem {
    pub graph: Graph,
    pub root: NodeId,
    pub bindings: Bindings,
    slots: Vec<BatchSlot>,
}

impl LmlProblem {
    /// Assemble the graph for `cfg.kind`. `params` must already hold every
    /// parameter the kind requires (see [`init_params`]).
    pub fn build(tasks: &[TaskRecord], cfg: &FitConfig, params: &ParamSet) -> Result<Self> {
        let pooled = pool_observations(tasks, cfg)?;
        let emb = cfg.resolve_embedding(tasks);
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let n = pooled.obs.len();

        let theta = g.input("theta", n, pooled.theta_dim)?;
        let z = g.input("z", n, 1)?;
        bindings.set("theta", pooled.theta.clone());
        bindings.set("z", pooled.z.clone());

        let mut slots = Vec::new();
        let task_rows: Option<NodeId> = match cfg.kind {
            SurrogateKind::PlainGP | SurrogateKind::PlainBLR => None,
            SurrogateKind::MultiGP | SurrogateKind::MultiBLR => None,
            SurrogateKind::ManualGP | SurrogateKind::ManualBLR => {
                Some(manual_vector_node(&mut g, tasks)?)
            }
            SurrogateKind::DistGP | SurrogateKind::DistBLR => {
                let emb = emb.as_ref().expect("dist kind resolves an embedding");
                validate_embedding_tasks(tasks, emb)?;
                let mut rows = Vec::with_capacity(tasks.len());
                for (t, task) in tasks.iter().enumerate() {
                    let prefix = format!("task{t}");
                    let b = task.data.len().min(cfg.batch_size);
                    let psi = crate::embeddings::psi_graph(
                        &mut g,
                        emb,
                        task.data.dim(),
                        task.data.num_classes,
                        &prefix,
                        b,
                    )?;
                    let mut tail = vec![task.rescaled_size];
                    tail.extend(task.data.class_ratios());
                    let tail_len = tail.len();
                    let tail_node = g.constant(
                        Array2::from_shape_vec((1, tail_len), tail)
                            .expect("row vector shape always matches"),
                    );
                    rows.push(g.concat_cols(&[psi, tail_node])?);
                    slots.push(BatchSlot {
                        task: t,
                        prefix,
                        rows: b,
                        redraw: task.data.len() > cfg.batch_size,
                    });
                }
                Some(g.concat_rows(&rows)?)
            }
        };

        let membership = g.constant(pooled.membership.clone());
        let root = if cfg.kind.is_gp() {
            let kp_tasks = match cfg.kind {
                SurrogateKind::PlainGP => None,
                SurrogateKind::MultiGP => {
                    let l_raw = g.input("task_l_raw", pooled.n_tasks, pooled.n_tasks)?;
                    Some(gp::similarity_matrix_graph(&mut g, l_raw)?)
                }
                _ => {
                    let v = task_rows.expect("task vectors present");
                    let log_ls = g.input("log_ls_task", g.shape(v).1, 1)?;
                    let q = gp::ard_sq_dist_graph(&mut g, v, log_ls)?;
                    Some(g.matern32(q))
                }
            };
            gp::gp_lml_graph(&mut g, theta, z, membership, kp_tasks)?
        } else {
            let ups_in = match cfg.kind {
                SurrogateKind::PlainBLR => theta,
                SurrogateKind::MultiBLR => g.concat_cols(&[theta, membership])?,
                _ => {
                    let v = task_rows.expect("task vectors present");
                    let v_obs = g.matmul(membership, v)?;
                    g.concat_cols(&[theta, v_obs])?
                }
            };
            blr::blr_lml_graph(&mut g, ups_in, z, cfg.feature_width)?
        };

        let mut problem = LmlProblem { graph: g, root, bindings, slots };
        // Bind full-set slots once; redraw slots get placeholders replaced
        // by `rebind` before every evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        problem.rebind(tasks, emb.as_ref(), &mut rng)?;
        params.bind(&mut problem.bindings);
        Ok(problem)
    }

    /// Draw fresh minibatch rows for every oversized dataset and bind the
    /// corresponding inputs. Datasets at or below the batch size keep their
    /// full, ordered row set.
    pub fn rebind(
        &mut self,
        tasks: &[TaskRecord],
        emb: Option<&EmbeddingConfig>,
        rng: &mut impl rand::Rng,
    ) -> Result<()> {
        let emb = match emb {
            Some(e) => e,
            None => {
                if self.slots.is_empty() {
                    return Ok(());
                }
                return Err(Error::Contract("embedding config required to rebind".into()));
            }
        };
        for slot in &self.slots {
            let task = &tasks[slot.task];
            let already_bound = !slot.redraw && self.bindings.get(&format!("{}_x", slot.prefix)).is_some();
            if already_bound {
                continue;
            }
            let rows = minibatch_indices(task.data.len(), slot.rows, rng);
            bind_task_rows(&mut self.bindings, &slot.prefix, emb, &task.data, &rows)?;
        }
        Ok(())
    }
}

/// Bind one task's minibatch under `prefix` following the embedding mode's
/// input contract.
pub fn bind_task_rows(
    bindings: &mut Bindings,
    prefix: &str,
    emb: &EmbeddingConfig,
    data: &Dataset,
    rows: &[usize],
) -> Result<()> {
    let mut x = Array2::zeros((rows.len(), data.dim()));
    for (i, &r) in rows.iter().enumerate() {
        x.row_mut(i).assign(&data.x.row(r));
    }
    bindings.set(&format!("{prefix}_x"), x);
    use crate::embeddings::EmbeddingMode::*;
    match emb.mode {
        MarginalOnly => {}
        CrossCovariance => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract("classification data needs labels".into()))?;
            let picked: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            bindings.set(&format!("{prefix}_onehot"), one_hot(&picked, data.num_classes));
        }
        MarginalConditional | CrossCovarianceRegression | JointMean => {
            let y = data
                .y
                .as_ref()
                .ok_or_else(|| Error::Contract("mode needs real-valued labels".into()))?;
            let mut ym = Array2::zeros((rows.len(), 1));
            for (i, &r) in rows.iter().enumerate() {
                ym[[i, 0]] = y[r];
            }
            bindings.set(&format!("{prefix}_y"), ym);
        }
    }
    Ok(())
}

fn manual_vector_node(g: &mut Graph, tasks: &[TaskRecord]) -> Result<NodeId> {
    let dim = tasks
        .first()
        .and_then(|t| t.manual_vector.as_ref())
        .map(|v| v.len())
        .ok_or_else(|| Error::Contract("manual kinds need task vectors on every task".into()))?;
    let mut v = Array2::zeros((tasks.len(), dim));
    for (t, task) in tasks.iter().enumerate() {
        let vec = task
            .manual_vector
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("task {t} is missing its manual vector")))?;
        if vec.len() != dim {
            return Err(Error::Contract(format!(
                "manual vector dimension mismatch: task {t} has {}, expected {dim}",
                vec.len()
            )));
        }
        for (j, x) in vec.iter().enumerate() {
            v[[t, j]] = *x;
        }
    }
    Ok(g.constant(v))
}

fn validate_embedding_tasks(tasks: &[TaskRecord], _emb: &EmbeddingConfig) -> Result<()> {
    let first = &tasks[0].data;
    for (t, task) in tasks.iter().enumerate() {
        if task.data.kind != first.kind
            || task.data.dim() != first.dim()
            || task.data.num_classes != first.num_classes
        {
            return Err(Error::Contract(format!(
                "task {t} differs in kind, dimension or class count; embeddings share one feature map"
            )));
        }
    }
    Ok(())
}

/// Fresh parameters for `cfg.kind`, following the init conventions: mean at
/// the observed average, amplitude at the observed variance, noise at 1% of
/// it, unit lengthscales, Glorot networks with zero biases.
pub fn init_params(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    rng: &mut impl rand::Rng,
) -> Result<ParamSet> {
    let pooled = pool_observations(tasks, cfg)?;
    let zs: Vec<f64> = pooled.obs.iter().map(|o| o.z).collect();
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
    let emb = cfg.resolve_embedding(tasks);

    let mut params = ParamSet::new();
    if cfg.kind.is_gp() {
        params.insert_scalar("mu", mean);
        params.insert_scalar("log_nu", (var + 1e-4).ln());
        params.insert_scalar("log_sigma2", (0.01 * var + 1e-6).ln());
        params.insert("log_ls_theta", Array2::zeros((pooled.theta_dim, 1)));
        match cfg.kind {
            SurrogateKind::MultiGP => {
                // Start near identity similarity with a touch of positive
                // correlation so gradients can pull tasks together.
                let diag = (1f64.exp() - 1.0).ln();
                let off = (0.1f64.exp() - 1.0).ln();
                let nt = pooled.n_tasks;
                let mut l = Array2::zeros((nt, nt));
                for i in 0..nt {
                    for j in 0..=i {
                        l[[i, j]] = if i == j { diag } else { off };
                    }
                }
                params.insert("task_l_raw", l);
            }
            SurrogateKind::PlainGP => {}
            _ => {
                let qdim = task_vector_dim(tasks, cfg, emb.as_ref())?;
                params.insert("log_ls_task", Array2::zeros((qdim, 1)));
            }
        }
    } else {
        params.insert_scalar("log_alpha", 0.0);
        params.insert_scalar("log_sigma2", (0.01 * var + 1e-6).ln());
        let in_dim = pooled.theta_dim
            + match cfg.kind {
                SurrogateKind::PlainBLR => 0,
                SurrogateKind::MultiBLR => pooled.n_tasks,
                _ => task_vector_dim(tasks, cfg, emb.as_ref())?,
            };
        blr::init_feature_params(&mut params, in_dim, cfg.feature_width, rng);
    }
    if let Some(emb) = &emb {
        let emb_params = init_embedding_params(emb, tasks[0].data.dim(), rng);
        for name in emb_params.names() {
            params.insert(name, emb_params.get(name).clone());
        }
    }
    Ok(params)
}

/// Dimension of the task vector rows the kernel or feature map consumes.
fn task_vector_dim(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    emb: Option<&EmbeddingConfig>,
) -> Result<usize> {
    match cfg.kind {
        SurrogateKind::ManualGP | SurrogateKind::ManualBLR => tasks
            .iter()
            .find_map(|t| t.manual_vector.as_ref())
            .map(|v| v.len())
            .ok_or_else(|| Error::Contract("manual kinds need task vectors".into())),
        SurrogateKind::DistGP | SurrogateKind::DistBLR => {
            let emb = emb.ok_or_else(|| Error::Contract("dist kinds need an embedding".into()))?;
            let data = &tasks[cfg.target].data;
            Ok(emb.psi_dim(data.num_classes) + 1 + data.class_ratios().len())
        }
        _ => Ok(0),
    }
}

/// A fitted surrogate: final parameters plus everything needed to answer
/// posterior queries at the target task deterministically.
pub struct FittedSurrogate {
    pub kind: SurrogateKind,
    pub params: ParamSet,
    pub embedding: Option<EmbeddingConfig>,
    pub target: usize,
    /// Full-sample task vectors, one per task (empty vectors for kinds that
    /// do not use them).
    pub task_vectors: Vec<Vec<f64>>,
    /// Log marginal likelihood at the last optimizer step.
    pub final_lml: f64,
    /// Optimizer steps actually run.
    pub steps_run: usize,
    gp: Option<gp::GpPosterior>,
    blr: Option<blr::BlrPosterior>,
    n_tasks: usize,
    n_obs: usize,
}

impl FittedSurrogate {
    /// Number of pooled observations the posterior conditions on.
    pub fn n_observations(&self) -> usize {
        self.n_obs
    }

    /// A prior-only GP surrogate whose posterior is `(mu, nu)` everywhere,
    /// with a caller-chosen observation count. Lets consumers be tested
    /// against a posterior with exactly known values.
    #[cfg(test)]
    pub(crate) fn constant_for_tests(mu: f64, nu: f64, theta_dim: usize, n_obs: usize) -> Self {
        FittedSurrogate {
            kind: SurrogateKind::PlainGP,
            params: ParamSet::new(),
            embedding: None,
            target: 0,
            task_vectors: vec![Vec::new()],
            final_lml: f64::NAN,
            steps_run: 0,
            gp: Some(gp::GpPosterior::prior(mu, nu, theta_dim)),
            blr: None,
            n_tasks: 1,
            n_obs,
        }
    }
    /// Posterior mean and variance of the latent accuracy at the target
    /// task for a batch of standardized hyperparameter rows.
    pub fn predict(&self, thetas: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if let Some(gp) = &self.gp {
            gp.predict(thetas)
        } else if let Some(blr) = &self.blr {
            blr.predict(thetas)
        } else {
            Err(Error::Contract("surrogate holds no posterior".into()))
        }
    }

    /// Learned similarity between the target task and every task, for the
    /// GP family: the task kernel value for dist/manual kinds, the
    /// correlation-normalized similarity matrix entry for MultiGP, and
    /// `None` for the BLR family and plain kinds where no task similarity
    /// exists.
    pub fn task_similarities(&self) -> Option<Vec<f64>> {
        match self.kind {
            SurrogateKind::DistGP | SurrogateKind::ManualGP => {
                let ls: Vec<f64> =
                    self.params.get("log_ls_task").iter().map(|v| v.exp()).collect();
                let target = &self.task_vectors[self.target];
                Some(
                    self.task_vectors
                        .iter()
                        .map(|v| gp::matern32_ard(target, v, &ls))
                        .collect(),
                )
            }
            SurrogateKind::MultiGP => {
                let (_, s) = task_similarity(&self.params.get("task_l_raw").view());
                let t = self.target;
                Some(
                    (0..self.n_tasks)
                        .map(|i| s[[t, i]] / (s[[t, t]] * s[[i, i]]).sqrt())
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

/// Fit a surrogate by ADAM on the log marginal likelihood.
///
/// `init` warm-starts from a previous optimum under the reduced step
/// budget. Numeric failures (a covariance that stays indefinite through the
/// jitter ladder, or non-finite gradients) trigger up to two fresh
/// re-initializations before the fit is abandoned.
pub fn fit_surrogate(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    init: Option<&ParamSet>,
) -> Result<FittedSurrogate> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let emb = cfg.resolve_embedding(tasks);
    let mut last_err: Option<Error> = None;
    for attempt in 0..FIT_ATTEMPTS {
        let (params, cap) = match (init, attempt) {
            (Some(p), 0) => (p.clone(), cfg.warm_steps),
            _ => (init_params(tasks, cfg, &mut rng)?, cfg.max_steps),
        };
        match run_adam(tasks, cfg, emb.as_ref(), params, cap, &mut rng) {
            Ok((params, lml, steps)) => return finalize(tasks, cfg, emb, params, lml, steps),
            Err(e @ Error::Numeric(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Fit(format!(
        "marginal-likelihood fit failed after {FIT_ATTEMPTS} initializations: {}",
        last_err.map_or_else(|| "unknown".into(), |e| e.to_string())
    )))
}

fn run_adam(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    emb: Option<&EmbeddingConfig>,
    mut params: ParamSet,
    cap: usize,
    rng: &mut impl rand::Rng,
) -> Result<(ParamSet, f64, usize)> {
    let mut problem = LmlProblem::build(tasks, cfg, &params)?;
    let names = params.names().iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut adam = AdamState::new(params.dim());
    let adam_cfg = AdamConfig::default();
    let mut window = ConvergenceWindow::standard();
    let mut flat = params.to_flat();
    let mut value = f64::NAN;
    let mut steps = 0;
    for _ in 0..cap {
        problem.rebind(tasks, emb, rng)?;
        params.bind(&mut problem.bindings);
        let (v, grads) = problem.graph.value_and_grad(problem.root, &problem.bindings, &name_refs)?;
        if !v.is_finite() {
            return Err(Error::Numeric("log marginal likelihood is not finite".into()));
        }
        value = v;
        steps += 1;
        if window.push(v) {
            break;
        }
        let mut grad_flat = params.flat_grads(&grads);
        for gv in &mut grad_flat {
            *gv = -*gv;
        }
        adam.step(&mut flat, &grad_flat, &adam_cfg)?;
        params.set_from_flat(&flat);
    }
    Ok((params, value, steps))
}

fn finalize(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    emb: Option<EmbeddingConfig>,
    params: ParamSet,
    final_lml: f64,
    steps_run: usize,
) -> Result<FittedSurrogate> {
    let pooled = pool_observations(tasks, cfg)?;
    let task_vectors = full_task_vectors(tasks, cfg, emb.as_ref(), &params)?;
    let mut fitted = FittedSurrogate {
        kind: cfg.kind,
        params,
        embedding: emb,
        target: if cfg.kind.target_only() { 0 } else { cfg.target },
        task_vectors,
        final_lml,
        steps_run,
        gp: None,
        blr: None,
        n_tasks: pooled.n_tasks,
        n_obs: pooled.obs.len(),
    };
    if cfg.kind.is_gp() {
        fitted.gp = Some(gp::GpPosterior::build(&pooled, &fitted)?);
    } else {
        fitted.blr = Some(blr::BlrPosterior::build(&pooled, &fitted)?);
    }
    Ok(fitted)
}

/// Full-sample task vectors at the fitted parameters: the query-time view
/// of each task. Multi kinds get a one-hot code (used directly by MultiBLR
/// features); plain kinds get empty vectors.
fn full_task_vectors(
    tasks: &[TaskRecord],
    cfg: &FitConfig,
    emb: Option<&EmbeddingConfig>,
    params: &ParamSet,
) -> Result<Vec<Vec<f64>>> {
    match cfg.kind {
        SurrogateKind::PlainGP | SurrogateKind::PlainBLR => Ok(vec![Vec::new()]),
        SurrogateKind::MultiGP | SurrogateKind::MultiBLR => Ok((0..tasks.len())
            .map(|t| {
                let mut v = vec![0.0; tasks.len()];
                v[t] = 1.0;
                v
            })
            .collect()),
        SurrogateKind::ManualGP | SurrogateKind::ManualBLR => tasks
            .iter()
            .enumerate()
            .map(|(t, task)| {
                task.manual_vector
                    .clone()
                    .ok_or_else(|| Error::Contract(format!("task {t} has no manual vector")))
            })
            .collect(),
        SurrogateKind::DistGP | SurrogateKind::DistBLR => {
            let emb = emb.ok_or_else(|| Error::Contract("dist kinds need an embedding".into()))?;
            tasks
                .iter()
                .map(|task| {
                    let psi = embed_query(params, emb, &task.data)?;
                    let tv = TaskVector::assemble(
                        &psi,
                        task.rescaled_size,
                        &task.data.class_ratios(),
                    )?;
                    Ok(tv.values.to_vec())
                })
                .collect()
        }
    }
}
