//! The Bayesian-linear-regression half of the surrogate family: a learned
//! three-layer tanh feature map over the concatenated inputs, a Gaussian
//! weight prior, and a marginal likelihood whose cost is linear in the
//! number of observations and cubic only in the fixed feature dimension.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::diffkit::linalg;
use crate::diffkit::params::{glorot_uniform, ParamSet};
use crate::diffkit::{Graph, NodeId};
use crate::error::{Error, Result};

use super::{FittedSurrogate, PooledObservations};

/// Insert fresh feature-map parameters `ups_w1..3`, `ups_b1..3` for an
/// input of `in_dim` columns: Glorot weights, zero biases.
pub fn init_feature_params(
    params: &mut ParamSet,
    in_dim: usize,
    width: usize,
    rng: &mut impl rand::Rng,
) {
    let mut prev = in_dim;
    for layer in 1..=3 {
        params.insert(&format!("ups_w{layer}"), glorot_uniform(prev, width, rng));
        params.insert(&format!("ups_b{layer}"), Array2::zeros((1, width)));
        prev = width;
    }
}

/// Graph fragment: the three-layer tanh feature map. Declares the weight
/// inputs so one parameter set drives training and prediction alike.
pub fn feature_map_graph(g: &mut Graph, x: NodeId, width: usize) -> Result<NodeId> {
    let (n, mut prev) = g.shape(x);
    let ones = g.constant(Array2::from_elem((n, 1), 1.0));
    let mut h = x;
    for layer in 1..=3 {
        let w = g.input(&format!("ups_w{layer}"), prev, width)?;
        let b = g.input(&format!("ups_b{layer}"), 1, width)?;
        let hw = g.matmul(h, w)?;
        let bm = g.matmul(ones, b)?;
        let pre = g.add(hw, bm)?;
        h = g.tanh(pre);
        prev = width;
    }
    Ok(h)
}

/// Plain evaluation of the same feature map.
pub fn feature_map_forward(params: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut h = x.to_owned();
    for layer in 1..=3 {
        let w = params.get(&format!("ups_w{layer}"));
        let b = params.get(&format!("ups_b{layer}"));
        let mut pre = h.dot(w);
        for mut row in pre.axis_iter_mut(Axis(0)) {
            row += &b.row(0);
        }
        h = pre.mapv(f64::tanh);
    }
    h
}

/// Log marginal likelihood graph for the BLR family. Declares `log_alpha`,
/// `log_sigma2` and the feature-map weights. The additive normal constant
/// is included so values are directly comparable with the GP marginal.
pub fn blr_lml_graph(g: &mut Graph, ups_in: NodeId, z: NodeId, width: usize) -> Result<NodeId> {
    let n = g.shape(ups_in).0;
    if g.shape(z) != (n, 1) {
        return Err(Error::Graph(format!(
            "targets must be {n}x1, got {:?}",
            g.shape(z)
        )));
    }
    let u = feature_map_graph(g, ups_in, width)?;
    let log_alpha = g.scalar_input("log_alpha")?;
    let log_sigma2 = g.scalar_input("log_sigma2")?;
    let diff = g.sub(log_alpha, log_sigma2)?;
    let ratio = g.exp(diff);

    let ut = g.transpose(u);
    let gram = g.matmul(ut, u)?;
    let scaled = g.scale_by(gram, ratio)?;
    let eye = g.constant(Array2::eye(width));
    let kdim = g.add(eye, scaled)?;
    let l = g.cholesky(kdim)?;
    let uz = g.matmul(ut, z)?;
    let e = g.tri_solve(l, uz, false)?;

    let esq = g.square(e);
    let e2 = g.sum(esq);
    let zsq = g.square(z);
    let z2 = g.sum(zsq);
    let fit_scaled = g.scale_by(e2, ratio)?;
    let fit_diff = g.sub(fit_scaled, z2)?;
    let neg_ls2 = g.negate(log_sigma2);
    let inv_s2 = g.exp(neg_ls2);
    let half_inv = g.scale(inv_s2, 0.5);
    let datafit = g.scale_by(fit_diff, half_inv)?;

    let ldiag = g.diag(l)?;
    let llog = g.log(ldiag);
    let lsum = g.sum(llog);
    let logdet = g.negate(lsum);
    let sig_term = g.scale(log_sigma2, -(n as f64) / 2.0);
    let constant = g.constant_scalar(-(n as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln());

    let a = g.add(datafit, logdet)?;
    let b = g.add(sig_term, constant)?;
    g.add(a, b)
}

/// Marginal likelihood from an explicit feature matrix: the non-graph twin
/// of [`blr_lml_graph`], used by posteriors and oracles.
pub fn lml_from_features(
    u: &ArrayView2<f64>,
    z: &ArrayView2<f64>,
    alpha: f64,
    sigma2: f64,
) -> Result<f64> {
    let (n, d) = (u.nrows(), u.ncols());
    let ratio = alpha / sigma2;
    let mut kdim = u.t().dot(u) * ratio;
    for i in 0..d {
        kdim[[i, i]] += 1.0;
    }
    let l = linalg::cholesky(&kdim.view())
        .map_err(|_| Error::Numeric("feature Gram factorization failed".into()))?;
    let uz = u.t().dot(z);
    let e = linalg::solve_lower(&l.view(), &uz.view(), false);
    let e2: f64 = e.iter().map(|v| v * v).sum();
    let z2: f64 = z.iter().map(|v| v * v).sum();
    let logdet: f64 = (0..d).map(|i| l[[i, i]].ln()).sum();
    Ok((ratio * e2 - z2) / (2.0 * sigma2) - logdet - (n as f64) / 2.0 * sigma2.ln()
        - (n as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln())
}

/// Cached posterior for the BLR family. Queries assemble the same inputs
/// the fit saw — standardized hyperparameters with the target task's
/// vector appended — push them through the fitted feature map, and read
/// the weight posterior through the stored Cholesky factor.
pub struct BlrPosterior {
    alpha: f64,
    sigma2: f64,
    /// Cholesky factor of K_dim built from full-sample features.
    l: Array2<f64>,
    /// L^{-T} L^{-1} Upsilon^T z, so the mean is (alpha/sigma2) u* . proj.
    proj: Array1<f64>,
    /// Feature-map weights only (`ups_*`).
    weights: ParamSet,
    /// Per-row suffix for queries: the target's task vector (or one-hot,
    /// or empty for the plain kind).
    tail: Vec<f64>,
}

impl BlrPosterior {
    /// Posterior with no observations: zero mean, prior feature variance.
    pub fn prior(alpha: f64, sigma2: f64, weights: ParamSet, tail: Vec<f64>, width: usize) -> Self {
        BlrPosterior {
            alpha,
            sigma2,
            l: Array2::eye(width),
            proj: Array1::zeros(width),
            weights,
            tail,
        }
    }

    pub(super) fn build(pooled: &PooledObservations, fitted: &FittedSurrogate) -> Result<Self> {
        let params = &fitted.params;
        let alpha = params.scalar("log_alpha").exp();
        let sigma2 = params.scalar("log_sigma2").exp();
        let mut weights = ParamSet::new();
        for name in params.names() {
            if name.starts_with("ups_") {
                weights.insert(name, params.get(name).clone());
            }
        }
        let width = weights.get("ups_b1").ncols();

        let n = pooled.obs.len();
        let tail_dim = fitted.task_vectors[fitted.target].len();
        let mut x = Array2::zeros((n, pooled.theta_dim + tail_dim));
        for (i, o) in pooled.obs.iter().enumerate() {
            for (j, v) in o.theta_std.iter().enumerate() {
                x[[i, j]] = *v;
            }
            for (j, v) in fitted.task_vectors[o.task].iter().enumerate() {
                x[[i, pooled.theta_dim + j]] = *v;
            }
        }
        let u = feature_map_forward(&weights, &x.view());
        let ratio = alpha / sigma2;
        let mut kdim = u.t().dot(&u) * ratio;
        for i in 0..width {
            kdim[[i, i]] += 1.0;
        }
        let l = linalg::cholesky(&kdim.view())
            .map_err(|_| Error::Numeric("feature Gram factorization failed".into()))?;
        let uz = u.t().dot(&pooled.z);
        let e = linalg::solve_lower(&l.view(), &uz.view(), false);
        let proj = linalg::solve_lower(&l.view(), &e.view(), true).column(0).to_owned();
        Ok(BlrPosterior {
            alpha,
            sigma2,
            l,
            proj,
            weights,
            tail: fitted.task_vectors[fitted.target].clone(),
        })
    }

    /// Batch posterior at the target task.
    pub fn predict(&self, thetas: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let c = thetas.nrows();
        let mut x = Array2::zeros((c, thetas.ncols() + self.tail.len()));
        for i in 0..c {
            for (j, v) in thetas.row(i).iter().enumerate() {
                x[[i, j]] = *v;
            }
            for (j, v) in self.tail.iter().enumerate() {
                x[[i, thetas.ncols() + j]] = *v;
            }
        }
        let u = feature_map_forward(&self.weights, &x.view());
        self.predict_features(&u.view())
    }

    /// Posterior from explicit feature rows, for callers that bypass the
    /// input assembly.
    pub fn predict_features(&self, u: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let ratio = self.alpha / self.sigma2;
        let mean = Array1::from_iter(u.axis_iter(Axis(0)).map(|row| ratio * row.dot(&self.proj)));
        let v = linalg::solve_lower(&self.l.view(), &u.t().to_owned().view(), false);
        let var = Array1::from_iter(
            (0..u.nrows()).map(|i| self.alpha * v.column(i).iter().map(|x| x * x).sum::<f64>()),
        );
        Ok((mean, var))
    }
}
