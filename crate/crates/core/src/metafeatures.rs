//! Handcrafted dataset meta-features: the fixed-recipe alternative to
//! learned distribution embeddings.
//!
//! The vector has a general block computed from the feature matrix alone
//! (moment statistics, pairwise correlation/covariance summaries, PCA shape
//! statistics, intrinsic dimensionality) plus a kind-specific block: class
//! ratios, label entropy and classifier landmarkers for classification;
//! label moments and regressor landmarkers for regression. Landmarkers are
//! small standard models scored on a seeded 50/50 holdout.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::linalg;
use crate::embeddings::{Dataset, DatasetKind};
use crate::error::{Error, Result};

/// Variance floor for naive Bayes and similar per-feature estimates.
const VAR_FLOOR: f64 = 1e-9;
/// Diagonal loading for the pooled LDA covariance.
const LDA_RIDGE: f64 = 1e-6;
/// Ridge for the linear-regression landmarker's normal equations.
const LINREG_RIDGE: f64 = 1e-10;
/// Cumulative explained-variance threshold for intrinsic dimensionality.
const INTRINSIC_VAR: f64 = 0.95;

/// Meta-features of the feature matrix alone, independent of labels.
///
/// Layout (19 values): skewness min/max/mean/std, excess-kurtosis
/// min/max/mean/std, pairwise-correlation min/max/mean/std, pairwise-
/// covariance min/max/mean/std, first-PC skewness, first-PC excess
/// kurtosis, intrinsic dimensionality. Constant columns contribute zeros to
/// the moment statistics; with a single feature the pairwise summaries are
/// all zeros.
pub fn general_metafeatures(x: &ArrayView2<f64>) -> Vec<f64> {
    let p = x.ncols();
    let skews: Vec<f64> = (0..p).map(|j| skewness(&x.column(j).to_vec())).collect();
    let kurts: Vec<f64> = (0..p).map(|j| excess_kurtosis(&x.column(j).to_vec())).collect();

    let mut corrs = Vec::new();
    let mut covs = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let ci = x.column(i).to_vec();
            let cj = x.column(j).to_vec();
            let (cov, corr) = covariance_correlation(&ci, &cj);
            covs.push(cov);
            corrs.push(corr);
        }
    }

    let (pc_skew, pc_kurt, intrinsic) = pca_features(x);

    let mut out = Vec::with_capacity(19);
    out.extend(spread_stats(&skews));
    out.extend(spread_stats(&kurts));
    out.extend(spread_stats(&corrs));
    out.extend(spread_stats(&covs));
    out.push(pc_skew);
    out.push(pc_kurt);
    out.push(intrinsic);
    out
}

/// Full meta-feature vector for a supervised task. Unsupervised data is a
/// contract violation here; see [`unsupervised_manual_features`] for the
/// fixed-recipe description of unlabeled tasks.
pub fn task_metafeatures(data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let mut out = general_metafeatures(&data.x.view());
    match data.kind {
        DatasetKind::Classification => out.extend(classification_block(data, seed)?),
        DatasetKind::Regression => out.extend(regression_block(data, seed)?),
        DatasetKind::Unsupervised => {
            return Err(Error::Contract(
                "meta-features are defined for supervised tasks".into(),
            ))
        }
    }
    Ok(out)
}

/// Fixed-recipe description of an unlabeled task: the general block plus
/// each feature's raw mean. The explicit means matter because unlabeled
/// data skips per-task standardization, so sample location carries the
/// task identity.
pub fn unsupervised_manual_features(data: &Dataset) -> Vec<f64> {
    let mut out = general_metafeatures(&data.x.view());
    let s = data.len() as f64;
    for j in 0..data.dim() {
        out.push(data.x.column(j).sum() / s);
    }
    out
}

fn classification_block(data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("classification data must carry labels".into()))?;
    let ratios = data.class_ratios();
    let entropy = -ratios.iter().filter(|&&r| r > 0.0).map(|&r| r * r.ln()).sum::<f64>();

    let (train, test) = stratified_split(labels, seed);
    let x = &data.x;
    let acc_1nn = accuracy(&predict_1nn_class(x, labels, &train, &test), labels, &test);
    let acc_lda = accuracy(
        &predict_lda(x, labels, data.num_classes, &train, &test)?,
        labels,
        &test,
    );
    let acc_nb = accuracy(
        &predict_naive_bayes(x, labels, data.num_classes, &train, &test),
        labels,
        &test,
    );
    let tree = Tree::fit(x, &TreeTarget::Class(labels, data.num_classes), &train);
    let acc_tree = accuracy(&test.iter().map(|&i| tree.predict_class(&x.row(i).to_vec())).collect::<Vec<_>>(), labels, &test);

    let mut out = ratios;
    out.push(entropy);
    out.extend([acc_1nn, acc_lda, acc_nb, acc_tree]);
    Ok(out)
}

fn regression_block(data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let y = data
        .y
        .as_ref()
        .ok_or_else(|| Error::Contract("regression data must carry labels".into()))?;
    let yv = y.to_vec();
    let s = yv.len() as f64;
    let mean = yv.iter().sum::<f64>() / s;
    let var = yv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;

    let (train, test) = plain_split(yv.len(), seed);
    let x = &data.x;
    let r2_1nn = r_squared(&predict_1nn_real(x, &yv, &train, &test), &yv, &test);
    let r2_lin = r_squared(&predict_linear(x, &yv, &train, &test), &yv, &test);
    let tree = Tree::fit(x, &TreeTarget::Real(&yv), &train);
    let preds: Vec<f64> = test.iter().map(|&i| tree.predict_real(&x.row(i).to_vec())).collect();
    let r2_tree = r_squared(&preds, &yv, &test);

    Ok(vec![mean, var.sqrt(), skewness(&yv), excess_kurtosis(&yv), r2_1nn, r2_lin, r2_tree])
}

/// Per-coordinate min-max normalization across a set of task vectors.
/// Coordinates that are constant across tasks map to 0.5.
pub fn normalize_across_tasks(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let dim = vectors[0].len();
    assert!(vectors.iter().all(|v| v.len() == dim), "task vectors must share a length");
    let mut out = vec![vec![0.0; dim]; vectors.len()];
    for j in 0..dim {
        let lo = vectors.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
        let hi = vectors.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
        for (o, v) in out.iter_mut().zip(vectors) {
            o[j] = if hi > lo { (v[j] - lo) / (hi - lo) } else { 0.5 };
        }
    }
    out
}

/// Similarity as negated Euclidean distance; 0 for identical vectors,
/// increasingly negative for dissimilar ones.
pub fn l2_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "similarity needs equal dimensions");
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---- moment statistics ----

fn central_moments(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in v {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// Population skewness m3 / m2^(3/2); 0 for constant data.
pub fn skewness(v: &[f64]) -> f64 {
    let (_, m2, m3, _) = central_moments(v);
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Population excess kurtosis m4 / m2^2 - 3; 0 for constant data (and 0 for
/// a normal distribution by construction).
pub fn excess_kurtosis(v: &[f64]) -> f64 {
    let (_, m2, _, m4) = central_moments(v);
    if m2 <= 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

fn covariance_correlation(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov /= n;
    va /= n;
    vb /= n;
    let corr = if va > 0.0 && vb > 0.0 { cov / (va * vb).sqrt() } else { 0.0 };
    (cov, corr)
}

/// min/max/mean/std of a statistic list; all zeros when the list is empty.
fn spread_stats(v: &[f64]) -> [f64; 4] {
    if v.is_empty() {
        return [0.0; 4];
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    [lo, hi, mean, var.sqrt()]
}

fn pca_features(x: &ArrayView2<f64>) -> (f64, f64, f64) {
    let (s, p) = (x.nrows(), x.ncols());
    let mean = x.mean_axis(Axis(0)).expect("non-empty data");
    let mut centered = x.to_owned();
    for mut row in centered.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }
    let cov = centered.t().dot(&centered) / s as f64;
    let (vals, vecs) = linalg::symmetric_eigen(&cov.view());
    let total: f64 = vals.iter().map(|&v| v.max(0.0)).sum();
    let intrinsic = if total <= 0.0 {
        0.0
    } else {
        let mut acc = 0.0;
        let mut k = p;
        for (i, &v) in vals.iter().enumerate() {
            acc += v.max(0.0);
            if acc / total >= INTRINSIC_VAR {
                k = i + 1;
                break;
            }
        }
        k as f64
    };
    let first = vecs.column(0);
    let proj: Vec<f64> = centered.axis_iter(Axis(0)).map(|r| r.dot(&first)).collect();
    (skewness(&proj), excess_kurtosis(&proj), intrinsic)
}

// ---- landmarker scaffolding ----

/// 50/50 split preserving class proportions; the odd element of a class
/// goes to the training side.
fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..nc {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let cut = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn plain_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let cut = n.div_ceil(2);
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn accuracy(preds: &[usize], labels: &[usize], test: &[usize]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(test).filter(|&(&p, &i)| p == labels[i]).count();
    hits as f64 / test.len() as f64
}

/// R^2 against the test-set mean; defined as 0 when the test labels are
/// constant.
fn r_squared(preds: &[f64], y: &[f64], test: &[usize]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let mean = test.iter().map(|&i| y[i]).sum::<f64>() / test.len() as f64;
    let sst: f64 = test.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum();
    if sst <= 0.0 {
        return 0.0;
    }
    let sse: f64 = preds.iter().zip(test).map(|(&p, &i)| (y[i] - p) * (y[i] - p)).sum();
    1.0 - sse / sst
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_train(x: &Array2<f64>, train: &[usize], query: usize) -> usize {
    let q = x.row(query).to_vec();
    let mut best = train[0];
    let mut best_d = f64::INFINITY;
    for &t in train {
        let d = sq_dist(&q, &x.row(t).to_vec());
        if d < best_d {
            best_d = d;
            best = t;
        }
    }
    best
}

fn predict_1nn_class(x: &Array2<f64>, labels: &[usize], train: &[usize], test: &[usize]) -> Vec<usize> {
    test.iter().map(|&i| labels[nearest_train(x, train, i)]).collect()
}

fn predict_1nn_real(x: &Array2<f64>, y: &[f64], train: &[usize], test: &[usize]) -> Vec<f64> {
    test.iter().map(|&i| y[nearest_train(x, train, i)]).collect()
}

/// Linear discriminant analysis with a pooled, ridge-loaded covariance.
fn predict_lda(
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    train: &[usize],
    test: &[usize],
) -> Result<Vec<usize>> {
    let p = x.ncols();
    let mut means = Array2::<f64>::zeros((num_classes, p));
    let mut counts = vec![0usize; num_classes];
    for &i in train {
        counts[labels[i]] += 1;
        let mut row = means.row_mut(labels[i]);
        row += &x.row(i);
    }
    for c in 0..num_classes {
        if counts[c] > 0 {
            let mut row = means.row_mut(c);
            row.mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    let mut pooled = Array2::<f64>::zeros((p, p));
    for &i in train {
        let d = &x.row(i) - &means.row(labels[i]);
        for a in 0..p {
            for b in 0..p {
                pooled[[a, b]] += d[a] * d[b];
            }
        }
    }
    pooled /= train.len().max(1) as f64;
    for a in 0..p {
        pooled[[a, a]] += LDA_RIDGE;
    }
    let (l, _) = linalg::cholesky_jittered(&pooled.view())?;

    // Discriminant: x^T S^-1 mu_c - mu_c^T S^-1 mu_c / 2 + log prior.
    let mut sinv_mu = Array2::<f64>::zeros((p, num_classes));
    for c in 0..num_classes {
        let m = means.row(c).insert_axis(Axis(1)).to_owned();
        let w = linalg::solve_lower(&l.view(), &m.view(), false);
        let v = linalg::solve_lower(&l.view(), &w.view(), true);
        sinv_mu.column_mut(c).assign(&v.column(0));
    }
    let total = train.len() as f64;
    let out = test
        .iter()
        .map(|&i| {
            let xi = x.row(i);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..num_classes {
                if counts[c] == 0 {
                    continue;
                }
                let lin = xi.dot(&sinv_mu.column(c));
                let quad = means.row(c).dot(&sinv_mu.column(c));
                let prior = (counts[c] as f64 / total).ln();
                let score = lin - 0.5 * quad + prior;
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(out)
}

fn predict_naive_bayes(
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    train: &[usize],
    test: &[usize],
) -> Vec<usize> {
    let p = x.ncols();
    let mut counts = vec![0usize; num_classes];
    let mut means = Array2::<f64>::zeros((num_classes, p));
    for &i in train {
        counts[labels[i]] += 1;
        let mut row = means.row_mut(labels[i]);
        row += &x.row(i);
    }
    for c in 0..num_classes {
        if counts[c] > 0 {
            let mut row = means.row_mut(c);
            row.mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    let mut vars = Array2::<f64>::from_elem((num_classes, p), VAR_FLOOR);
    for &i in train {
        let c = labels[i];
        for j in 0..p {
            let d = x[[i, j]] - means[[c, j]];
            vars[[c, j]] += d * d / counts[c] as f64;
        }
    }
    let total = train.len() as f64;
    test.iter()
        .map(|&i| {
            let mut best = 0;
            let mut best_ll = f64::NEG_INFINITY;
            for c in 0..num_classes {
                if counts[c] == 0 {
                    continue;
                }
                let mut ll = (counts[c] as f64 / total).ln();
                for j in 0..p {
                    let v = vars[[c, j]];
                    let d = x[[i, j]] - means[[c, j]];
                    ll += -0.5 * (d * d / v) - 0.5 * v.ln();
                }
                if ll > best_ll {
                    best_ll = ll;
                    best = c;
                }
            }
            best
        })
        .collect()
}

// ---- CART ----

enum TreeTarget<'a> {
    Class(&'a [usize], usize),
    Real(&'a [f64]),
}

enum TreeNode {
    Leaf { class: usize, value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Greedy binary CART: Gini impurity for classification, variance for
/// regression; splits down to pure or two-sample nodes, no depth cap.
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn fit(x: &Array2<f64>, target: &TreeTarget, train: &[usize]) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        let idx = train.to_vec();
        tree.grow(x, target, idx);
        tree
    }

    fn grow(&mut self, x: &Array2<f64>, target: &TreeTarget, idx: Vec<usize>) -> usize {
        let node_slot = self.nodes.len();
        self.nodes.push(Self::leaf(target, &idx));
        if idx.len() < 2 || Self::is_pure(target, &idx) {
            return node_slot;
        }
        let Some((feature, threshold)) = Self::best_split(x, target, &idx) else {
            return node_slot;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| x[[i, feature]] <= threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            return node_slot;
        }
        let left = self.grow(x, target, left_idx);
        let right = self.grow(x, target, right_idx);
        self.nodes[node_slot] = TreeNode::Split { feature, threshold, left, right };
        node_slot
    }

    fn leaf(target: &TreeTarget, idx: &[usize]) -> TreeNode {
        match target {
            TreeTarget::Class(labels, nc) => {
                let mut counts = vec![0usize; *nc];
                for &i in idx {
                    counts[labels[i]] += 1;
                }
                let class = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(c, _)| c)
                    .unwrap_or(0);
                TreeNode::Leaf { class, value: 0.0 }
            }
            TreeTarget::Real(y) => {
                let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len().max(1) as f64;
                TreeNode::Leaf { class: 0, value: mean }
            }
        }
    }

    fn is_pure(target: &TreeTarget, idx: &[usize]) -> bool {
        match target {
            TreeTarget::Class(labels, _) => idx.windows(2).all(|w| labels[w[0]] == labels[w[1]]),
            TreeTarget::Real(y) => idx.windows(2).all(|w| y[w[0]] == y[w[1]]),
        }
    }

    fn best_split(x: &Array2<f64>, target: &TreeTarget, idx: &[usize]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None; // feature, threshold, score
        for feature in 0..x.ncols() {
            let mut order = idx.to_vec();
            order.sort_by(|&a, &b| x[[a, feature]].partial_cmp(&x[[b, feature]]).unwrap());
            let score_split = |cut: usize| -> f64 {
                match target {
                    TreeTarget::Class(labels, nc) => {
                        let gini = |part: &[usize]| {
                            let mut counts = vec![0usize; *nc];
                            for &i in part {
                                counts[labels[i]] += 1;
                            }
                            let n = part.len() as f64;
                            1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
                        };
                        let (l, r) = order.split_at(cut);
                        (l.len() as f64 * gini(l) + r.len() as f64 * gini(r)) / order.len() as f64
                    }
                    TreeTarget::Real(y) => {
                        let sse = |part: &[usize]| {
                            let n = part.len() as f64;
                            let mean = part.iter().map(|&i| y[i]).sum::<f64>() / n;
                            part.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum::<f64>()
                        };
                        let (l, r) = order.split_at(cut);
                        (sse(l) + sse(r)) / order.len() as f64
                    }
                }
            };
            for cut in 1..order.len() {
                let lo = x[[order[cut - 1], feature]];
                let hi = x[[order[cut], feature]];
                if hi <= lo {
                    continue;
                }
                let score = score_split(cut);
                if best.map_or(true, |(_, _, s)| score < s) {
                    best = Some((feature, 0.5 * (lo + hi), score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn descend(&self, row: &[f64]) -> &TreeNode {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { .. } => return &self.nodes[node],
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn predict_class(&self, row: &[f64]) -> usize {
        match self.descend(row) {
            TreeNode::Leaf { class, .. } => *class,
            _ => unreachable!(),
        }
    }

    fn predict_real(&self, row: &[f64]) -> f64 {
        match self.descend(row) {
            TreeNode::Leaf { value, .. } => *value,
            _ => unreachable!(),
        }
    }
}

/// Ordinary least squares with an intercept and a tiny ridge for numerical
/// safety, scored on the holdout.
fn predict_linear(x: &Array2<f64>, y: &[f64], train: &[usize], test: &[usize]) -> Vec<f64> {
    let p = x.ncols();
    let n = train.len();
    let mut xa = Array2::<f64>::zeros((n, p + 1));
    let mut yv = Array2::<f64>::zeros((n, 1));
    for (r, &i) in train.iter().enumerate() {
        xa.row_mut(r).slice_mut(ndarray::s![..p]).assign(&x.row(i));
        xa[[r, p]] = 1.0;
        yv[[r, 0]] = y[i];
    }
    let mut xtx = xa.t().dot(&xa);
    for d in 0..p + 1 {
        xtx[[d, d]] += LINREG_RIDGE;
    }
    let xty = xa.t().dot(&yv);
    let beta = match linalg::cholesky_jittered(&xtx.view()) {
        Ok((l, _)) => {
            let w = linalg::solve_lower(&l.view(), &xty.view(), false);
            linalg::solve_lower(&l.view(), &w.view(), true)
        }
        Err(_) => Array2::zeros((p + 1, 1)),
    };
    test.iter()
        .map(|&i| {
            let mut v = beta[[p, 0]];
            for j in 0..p {
                v += beta[[j, 0]] * x[[i, j]];
            }
            v
        })
        .collect()
}
