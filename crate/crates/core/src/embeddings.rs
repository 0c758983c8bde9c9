//! Learned embeddings of training-data distributions.
//!
//! A dataset is summarized by feature maps `phi` (small tanh networks with a
//! linear output layer) composed into kernel mean embeddings: the marginal
//! mean `(1/s) sum phi_x(x_l)`, the conditional mean operator of labels
//! given features, or their cross-covariance. The resulting vector `psi(D)`,
//! together with a rescaled sample size and (for classification) class
//! ratios, forms the task vector that the surrogate kernels compare tasks
//! with.
//!
//! Every embedding exists twice: as a graph fragment (so surrogate fits can
//! backpropagate into the feature-map weights) and as a plain evaluation
//! (for queries with frozen weights). Tests pin the two against each other.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::diffkit::linalg;
use crate::diffkit::params::{glorot_uniform, ParamSet};
use crate::diffkit::{Graph, NodeId};
use crate::error::{Error, Result};

/// Hidden width of every feature-map network.
pub const FEATURE_HIDDEN: usize = 20;
/// Output width of every feature-map network.
pub const FEATURE_OUT: usize = 10;
/// Default minibatch size for embedding inputs during fits.
pub const DEFAULT_BATCH: usize = 1000;
/// At query time datasets larger than this are represented by one fixed,
/// seeded subsample instead of the full sample.
pub const QUERY_SAMPLE_CAP: usize = 5000;
/// Initial value of the conditional-operator ridge (learned on log scale).
pub const LAMBDA_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Unsupervised,
    Regression,
    Classification,
}

/// One task's data. Labels are either real-valued (`y`) or class indices
/// (`labels`), depending on the kind.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Option<Array1<f64>>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub kind: DatasetKind,
}

impl Dataset {
    pub fn unsupervised(x: Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Contract("dataset needs at least one row".into()));
        }
        Ok(Self { x, y: None, labels: None, num_classes: 0, kind: DatasetKind::Unsupervised })
    }

    pub fn regression(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Contract("dataset needs at least one row".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self { x, y: Some(y), labels: None, num_classes: 0, kind: DatasetKind::Regression })
    }

    pub fn classification(x: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Contract("dataset needs at least one row".into()));
        }
        if x.nrows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Contract("classification needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            x,
            y: None,
            labels: Some(labels),
            num_classes,
            kind: DatasetKind::Classification,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Standardize features per column (mean 0, variance 1; constant columns
    /// become zeros) and min-max labels into [0, 1]. Unsupervised data is
    /// passed through untouched: for those tasks the raw location of the
    /// sample *is* the signal the embeddings must see.
    pub fn normalized(&self) -> Dataset {
        let mut out = self.clone();
        if self.kind != DatasetKind::Unsupervised {
            let s = self.x.nrows() as f64;
            for mut col in out.x.axis_iter_mut(Axis(1)) {
                let mean = col.sum() / s;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;
                let sd = var.sqrt();
                if sd > 0.0 {
                    col.mapv_inplace(|v| (v - mean) / sd);
                } else {
                    col.fill(0.0);
                }
            }
        }
        if let Some(y) = &mut out.y {
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                y.mapv_inplace(|v| (v - lo) / (hi - lo));
            } else {
                y.fill(0.5);
            }
        }
        out
    }

    /// Fraction of rows per class. Empty for non-classification data.
    pub fn class_ratios(&self) -> Vec<f64> {
        match &self.labels {
            None => Vec::new(),
            Some(labels) => {
                let mut counts = vec![0usize; self.num_classes];
                for &l in labels {
                    counts[l] += 1;
                }
                counts.iter().map(|&c| c as f64 / labels.len() as f64).collect()
            }
        }
    }
}

/// Which embedding summarizes a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Marginal mean embedding only; the unsupervised case.
    MarginalOnly,
    /// Marginal mean embedding plus the flattened conditional mean operator
    /// of labels given features. Default for regression.
    MarginalConditional,
    /// Flattened cross-covariance of features with one-hot labels, i.e. the
    /// ratio-weighted per-class mean embeddings. Default for classification.
    CrossCovariance,
    /// Marginal mean embedding plus the flattened feature/label
    /// cross-covariance; the cheaper regression alternative.
    CrossCovarianceRegression,
    /// Mean embedding of the joint feature map on [x, y].
    JointMean,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    pub hidden: usize,
    pub out_dim: usize,
    pub batch_size: usize,
}

impl EmbeddingConfig {
    pub fn new(mode: EmbeddingMode) -> Self {
        Self { mode, hidden: FEATURE_HIDDEN, out_dim: FEATURE_OUT, batch_size: DEFAULT_BATCH }
    }

    /// The default mode for each dataset kind.
    pub fn for_kind(kind: DatasetKind) -> Self {
        let mode = match kind {
            DatasetKind::Unsupervised => EmbeddingMode::MarginalOnly,
            DatasetKind::Regression => EmbeddingMode::MarginalConditional,
            DatasetKind::Classification => EmbeddingMode::CrossCovariance,
        };
        Self::new(mode)
    }

    /// Length of the psi vector this config produces for a dataset with
    /// `num_classes` classes (0 outside classification).
    pub fn psi_dim(&self, num_classes: usize) -> usize {
        let a = self.out_dim;
        match self.mode {
            EmbeddingMode::MarginalOnly | EmbeddingMode::JointMean => a,
            EmbeddingMode::MarginalConditional | EmbeddingMode::CrossCovarianceRegression => {
                a + a * a
            }
            EmbeddingMode::CrossCovariance => a * num_classes,
        }
    }
}

/// Initialize the trainable embedding parameters for one surrogate:
/// Glorot-uniform weights, zero biases, and the conditional ridge at its
/// starting value (stored as a log).
pub fn init_embedding_params(
    cfg: &EmbeddingConfig,
    p: usize,
    rng: &mut impl Rng,
) -> ParamSet {
    let mut params = ParamSet::new();
    let h = cfg.hidden;
    let a = cfg.out_dim;
    let mut net = |params: &mut ParamSet, prefix: &str, in_dim: usize| {
        params.insert(&format!("{prefix}_w1"), glorot_uniform(in_dim, h, rng));
        params.insert(&format!("{prefix}_b1"), Array2::zeros((1, h)));
        params.insert(&format!("{prefix}_w2"), glorot_uniform(h, a, rng));
        params.insert(&format!("{prefix}_b2"), Array2::zeros((1, a)));
    };
    match cfg.mode {
        EmbeddingMode::MarginalOnly | EmbeddingMode::CrossCovariance => {
            net(&mut params, "emb_x", p);
        }
        EmbeddingMode::MarginalConditional => {
            net(&mut params, "emb_x", p);
            net(&mut params, "emb_y", 1);
            params.insert_scalar("emb_log_lambda", LAMBDA_INIT.ln());
        }
        EmbeddingMode::CrossCovarianceRegression => {
            net(&mut params, "emb_x", p);
            net(&mut params, "emb_y", 1);
        }
        EmbeddingMode::JointMean => {
            net(&mut params, "emb_xy", p + 1);
        }
    }
    params
}

/// Names of the data inputs a psi graph for `input_prefix` expects.
pub fn psi_input_names(cfg: &EmbeddingConfig, input_prefix: &str) -> Vec<String> {
    match cfg.mode {
        EmbeddingMode::MarginalOnly => vec![format!("{input_prefix}_x")],
        EmbeddingMode::CrossCovariance => {
            vec![format!("{input_prefix}_x"), format!("{input_prefix}_onehot")]
        }
        _ => vec![format!("{input_prefix}_x"), format!("{input_prefix}_y")],
    }
}

/// Two-layer feature map as a graph fragment: tanh hidden layer, linear
/// output. Weight inputs are (re)declared under `param_prefix` so one
/// parameter set serves every task in a fit.
pub fn nn_graph(
    g: &mut Graph,
    x: NodeId,
    param_prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
) -> Result<NodeId> {
    let (batch, cols) = g.shape(x);
    if cols != in_dim {
        return Err(Error::Graph(format!(
            "feature map '{param_prefix}' expects {in_dim} columns, input has {cols}"
        )));
    }
    let w1 = g.input(&format!("{param_prefix}_w1"), in_dim, hidden)?;
    let b1 = g.input(&format!("{param_prefix}_b1"), 1, hidden)?;
    let w2 = g.input(&format!("{param_prefix}_w2"), hidden, out_dim)?;
    let b2 = g.input(&format!("{param_prefix}_b2"), 1, out_dim)?;
    let ones = g.constant(Array2::from_elem((batch, 1), 1.0));
    let xw = g.matmul(x, w1)?;
    let b1m = g.matmul(ones, b1)?;
    let pre = g.add(xw, b1m)?;
    let hid = g.tanh(pre);
    let hw = g.matmul(hid, w2)?;
    let b2m = g.matmul(ones, b2)?;
    g.add(hw, b2m)
}

/// Mean of the feature-map rows: a 1 x out_dim node.
pub fn mean_embedding_graph(g: &mut Graph, phi: NodeId) -> Result<NodeId> {
    let (rows, _) = g.shape(phi);
    let ones_row = g.constant(Array2::from_elem((1, rows), 1.0));
    let summed = g.matmul(ones_row, phi)?;
    Ok(g.scale(summed, 1.0 / rows as f64))
}

/// Conditional mean operator of the label features given the input
/// features, flattened row-major into a 1 x (b*a) node.
///
/// Computed as `B M^-1` with `B = Phi_y^T Phi_x` and
/// `M = lambda I + Phi_x^T Phi_x`, which equals the textbook
/// `Phi_y^T (Phi_x Phi_x^T + lambda I)^-1 Phi_x` by the push-through
/// identity while only ever factoring an out_dim x out_dim matrix.
pub fn conditional_operator_graph(
    g: &mut Graph,
    phi_x: NodeId,
    phi_y: NodeId,
    log_lambda: NodeId,
) -> Result<NodeId> {
    let a = g.shape(phi_x).1;
    let b = g.shape(phi_y).1;
    let ty = g.transpose(phi_y);
    let big_b = g.matmul(ty, phi_x)?; // b x a
    let tx = g.transpose(phi_x);
    let mtm = g.matmul(tx, phi_x)?; // a x a
    let lambda = g.exp(log_lambda);
    let eye = g.constant(Array2::eye(a));
    let ridge = g.scale_by(eye, lambda)?;
    let m = g.add(mtm, ridge)?;
    let l = g.cholesky(m)?;
    let bt = g.transpose(big_b);
    let w = g.tri_solve(l, bt, false)?;
    let v = g.tri_solve(l, w, true)?; // M^-1 B^T, a x b
    let c = g.transpose(v); // B M^-1, b x a
    g.reshape(c, 1, b * a)
}

/// Empirical cross-covariance `(1/s) Phi_x^T Phi_y` flattened row-major
/// into a 1 x (a*b) node. `phi_y` may be a one-hot label matrix, in which
/// case the columns are the ratio-weighted per-class mean embeddings.
pub fn cross_covariance_graph(g: &mut Graph, phi_x: NodeId, phi_y: NodeId) -> Result<NodeId> {
    let (s, a) = g.shape(phi_x);
    let b = g.shape(phi_y).1;
    let tx = g.transpose(phi_x);
    let prod = g.matmul(tx, phi_y)?; // a x b
    let scaled = g.scale(prod, 1.0 / s as f64);
    g.reshape(scaled, 1, a * b)
}

/// Full psi fragment for one task: declares the task's data inputs under
/// `input_prefix` (see [`psi_input_names`]) and returns a 1 x psi_dim node.
pub fn psi_graph(
    g: &mut Graph,
    cfg: &EmbeddingConfig,
    p: usize,
    num_classes: usize,
    input_prefix: &str,
    batch: usize,
) -> Result<NodeId> {
    let x = g.input(&format!("{input_prefix}_x"), batch, p)?;
    match cfg.mode {
        EmbeddingMode::MarginalOnly => {
            let phi_x = nn_graph(g, x, "emb_x", p, cfg.hidden, cfg.out_dim)?;
            mean_embedding_graph(g, phi_x)
        }
        EmbeddingMode::MarginalConditional => {
            let y = g.input(&format!("{input_prefix}_y"), batch, 1)?;
            let phi_x = nn_graph(g, x, "emb_x", p, cfg.hidden, cfg.out_dim)?;
            let phi_y = nn_graph(g, y, "emb_y", 1, cfg.hidden, cfg.out_dim)?;
            let marginal = mean_embedding_graph(g, phi_x)?;
            let log_lambda = g.scalar_input("emb_log_lambda")?;
            let cond = conditional_operator_graph(g, phi_x, phi_y, log_lambda)?;
            g.concat_cols(&[marginal, cond])
        }
        EmbeddingMode::CrossCovariance => {
            let onehot = g.input(&format!("{input_prefix}_onehot"), batch, num_classes)?;
            let phi_x = nn_graph(g, x, "emb_x", p, cfg.hidden, cfg.out_dim)?;
            cross_covariance_graph(g, phi_x, onehot)
        }
        EmbeddingMode::CrossCovarianceRegression => {
            let y = g.input(&format!("{input_prefix}_y"), batch, 1)?;
            let phi_x = nn_graph(g, x, "emb_x", p, cfg.hidden, cfg.out_dim)?;
            let phi_y = nn_graph(g, y, "emb_y", 1, cfg.hidden, cfg.out_dim)?;
            let marginal = mean_embedding_graph(g, phi_x)?;
            let cross = cross_covariance_graph(g, phi_x, phi_y)?;
            g.concat_cols(&[marginal, cross])
        }
        EmbeddingMode::JointMean => {
            let y = g.input(&format!("{input_prefix}_y"), batch, 1)?;
            let xy = g.concat_cols(&[x, y])?;
            let phi = nn_graph(g, xy, "emb_xy", p + 1, cfg.hidden, cfg.out_dim)?;
            mean_embedding_graph(g, phi)
        }
    }
}

/// Plain (non-graph) evaluation of a two-layer feature map.
pub fn nn_forward(params: &ParamSet, param_prefix: &str, x: &ArrayView2<f64>) -> Array2<f64> {
    let w1 = params.get(&format!("{param_prefix}_w1"));
    let b1 = params.get(&format!("{param_prefix}_b1"));
    let w2 = params.get(&format!("{param_prefix}_w2"));
    let b2 = params.get(&format!("{param_prefix}_b2"));
    let mut hid = x.dot(w1);
    for mut row in hid.axis_iter_mut(Axis(0)) {
        row += &b1.row(0);
    }
    hid.mapv_inplace(f64::tanh);
    let mut out = hid.dot(w2);
    for mut row in out.axis_iter_mut(Axis(0)) {
        row += &b2.row(0);
    }
    out
}

/// Plain conditional mean operator `B M^-1` (b x a).
pub fn conditional_operator(
    phi_x: &ArrayView2<f64>,
    phi_y: &ArrayView2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let a = phi_x.ncols();
    let big_b = phi_y.t().dot(phi_x);
    let mut m = phi_x.t().dot(phi_x);
    for i in 0..a {
        m[[i, i]] += lambda;
    }
    let sym = 0.5 * (&m + &m.t());
    let (l, _) = linalg::cholesky_jittered(&sym.view())?;
    let w = linalg::solve_lower(&l.view(), &big_b.t().to_owned().view(), false);
    let v = linalg::solve_lower(&l.view(), &w.view(), true);
    Ok(v.t().to_owned())
}

/// Plain cross-covariance `(1/s) Phi_x^T Phi_y` (a x b).
pub fn cross_covariance(phi_x: &ArrayView2<f64>, phi_y: &ArrayView2<f64>) -> Array2<f64> {
    let s = phi_x.nrows() as f64;
    phi_x.t().dot(phi_y) / s
}

/// One-hot encoding of class labels, s x num_classes.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// Evaluate psi for the given dataset rows with frozen parameters. The row
/// order is part of the minibatch contract: callers pass the indices their
/// rng drew, and full evaluations pass `0..s`.
pub fn embed_rows(
    params: &ParamSet,
    cfg: &EmbeddingConfig,
    data: &Dataset,
    rows: &[usize],
) -> Result<Array1<f64>> {
    if rows.is_empty() {
        return Err(Error::Contract("embedding needs at least one row".into()));
    }
    let x = gather_rows(&data.x, rows);
    let psi = match cfg.mode {
        EmbeddingMode::MarginalOnly => {
            let phi = nn_forward(params, "emb_x", &x.view());
            phi.mean_axis(Axis(0)).expect("non-empty batch")
        }
        EmbeddingMode::MarginalConditional => {
            let y = gather_y(data, rows)?;
            let phi_x = nn_forward(params, "emb_x", &x.view());
            let phi_y = nn_forward(params, "emb_y", &y.view());
            let marginal = phi_x.mean_axis(Axis(0)).expect("non-empty batch");
            let lambda = params.scalar("emb_log_lambda").exp();
            let cond = conditional_operator(&phi_x.view(), &phi_y.view(), lambda)?;
            concat_flat(&marginal, &cond)
        }
        EmbeddingMode::CrossCovariance => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract("cross-covariance mode needs labels".into()))?;
            let picked: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let oh = one_hot(&picked, data.num_classes);
            let phi_x = nn_forward(params, "emb_x", &x.view());
            let cross = cross_covariance(&phi_x.view(), &oh.view());
            Array1::from_iter(cross.iter().copied())
        }
        EmbeddingMode::CrossCovarianceRegression => {
            let y = gather_y(data, rows)?;
            let phi_x = nn_forward(params, "emb_x", &x.view());
            let phi_y = nn_forward(params, "emb_y", &y.view());
            let marginal = phi_x.mean_axis(Axis(0)).expect("non-empty batch");
            let cross = cross_covariance(&phi_x.view(), &phi_y.view());
            concat_flat(&marginal, &cross)
        }
        EmbeddingMode::JointMean => {
            let y = gather_y(data, rows)?;
            let mut xy = Array2::zeros((rows.len(), data.dim() + 1));
            xy.slice_mut(ndarray::s![.., ..data.dim()]).assign(&x);
            xy.slice_mut(ndarray::s![.., data.dim()..]).assign(&y);
            let phi = nn_forward(params, "emb_xy", &xy.view());
            phi.mean_axis(Axis(0)).expect("non-empty batch")
        }
    };
    Ok(psi)
}

/// Query-time embedding: the full sample, or one fixed seeded subsample for
/// datasets above [`QUERY_SAMPLE_CAP`]. The subsample depends only on the
/// dataset size, so repeated queries see the same rows.
pub fn embed_query(params: &ParamSet, cfg: &EmbeddingConfig, data: &Dataset) -> Result<Array1<f64>> {
    let s = data.len();
    let rows: Vec<usize> = if s <= QUERY_SAMPLE_CAP {
        (0..s).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x71e3_a5e5 ^ s as u64);
        rand::seq::index::sample(&mut rng, s, QUERY_SAMPLE_CAP).into_vec()
    };
    embed_rows(params, cfg, data, &rows)
}

/// Minibatch rows for one optimizer step: all rows (in order) when the
/// dataset fits the batch, otherwise a fresh draw without replacement.
pub fn minibatch_indices(s: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    if s <= batch {
        (0..s).collect()
    } else {
        rand::seq::index::sample(rng, s, batch).into_vec()
    }
}

/// The vector a surrogate kernel compares tasks with:
/// `[psi(D), s_rescaled, class ratios...]` in that fixed order.
#[derive(Clone, Debug)]
pub struct TaskVector {
    pub values: Array1<f64>,
    pub psi_dim: usize,
}

impl TaskVector {
    pub fn assemble(psi: &Array1<f64>, s_rescaled: f64, ratios: &[f64]) -> Result<Self> {
        if !(s_rescaled > 0.0 && s_rescaled <= 1.0) {
            return Err(Error::Contract(format!(
                "rescaled sample size must lie in (0, 1], got {s_rescaled}"
            )));
        }
        if !ratios.is_empty() {
            let sum: f64 = ratios.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
                return Err(Error::Contract(format!(
                    "class ratios must be nonnegative and sum to 1, got sum {sum}"
                )));
            }
        }
        let mut values = Vec::with_capacity(psi.len() + 1 + ratios.len());
        values.extend(psi.iter().copied());
        values.push(s_rescaled);
        values.extend_from_slice(ratios);
        Ok(Self { values: Array1::from(values), psi_dim: psi.len() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Rescale raw sample sizes by the largest one so every entry lands in
/// (0, 1]. A target that later outgrows the sources clamps at 1.
pub fn rescale_sample_size(s: usize, max_s: usize) -> f64 {
    ((s as f64) / (max_s as f64)).min(1.0)
}

fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

fn gather_y(data: &Dataset, rows: &[usize]) -> Result<Array2<f64>> {
    let y = data
        .y
        .as_ref()
        .ok_or_else(|| Error::Contract("this embedding mode needs real-valued labels".into()))?;
    let mut out = Array2::zeros((rows.len(), 1));
    for (i, &r) in rows.iter().enumerate() {
        out[[i, 0]] = y[r];
    }
    Ok(out)
}

fn concat_flat(head: &Array1<f64>, tail: &Array2<f64>) -> Array1<f64> {
    let mut v = Vec::with_capacity(head.len() + tail.len());
    v.extend(head.iter().copied());
    v.extend(tail.iter().copied());
    Array1::from(v)
}
