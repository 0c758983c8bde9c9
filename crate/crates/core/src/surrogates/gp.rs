//! The GP half of the surrogate family: product-Matern covariance over
//! hyperparameters and task vectors, exact log marginal likelihood through
//! a Cholesky factor, and a cached posterior for batch queries.

use ndarray::{Array1, Array2, ArrayView2};

use crate::diffkit::linalg;
use crate::diffkit::{matern32_profile, Graph, NodeId};
use crate::error::{Error, Result};

use super::{task_similarity, FittedSurrogate, PooledObservations, SurrogateKind};

/// Posterior variances this far below zero are treated as rounding and
/// clamped; anything lower is a numeric failure.
const VARIANCE_TOL: f64 = 1e-10;

/// Matern-3/2 with a separate lengthscale per dimension.
pub fn matern32_ard(u: &[f64], v: &[f64], lengthscales: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "kernel inputs must share a dimension");
    assert_eq!(u.len(), lengthscales.len(), "one lengthscale per dimension");
    let q: f64 = u
        .iter()
        .zip(v)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    matern32_profile(q)
}

/// Kernel matrix between two row sets under shared ARD lengthscales.
pub fn matern_gram(a: &ArrayView2<f64>, b: &ArrayView2<f64>, lengthscales: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        let ai = a.row(i);
        for j in 0..b.nrows() {
            let bj = b.row(j);
            let q: f64 = ai
                .iter()
                .zip(bj.iter())
                .zip(lengthscales)
                .map(|((x, y), l)| {
                    let d = (x - y) / l;
                    d * d
                })
                .sum();
            out[[i, j]] = matern32_profile(q);
        }
    }
    out
}

/// Graph fragment: squared scaled distances between the rows of `x` under
/// lengthscales `exp(log_ls)`. Diagonal entries are exactly zero because
/// the row-norm and cross terms are computed from identical products.
pub fn ard_sq_dist_graph(g: &mut Graph, x: NodeId, log_ls: NodeId) -> Result<NodeId> {
    let (n, q) = g.shape(x);
    if g.shape(log_ls) != (q, 1) {
        return Err(Error::Graph(format!(
            "expected {q} lengthscales, got shape {:?}",
            g.shape(log_ls)
        )));
    }
    let neg = g.negate(log_ls);
    let inv_ls = g.exp(neg);
    let scale = g.make_diag(inv_ls)?;
    let xs = g.matmul(x, scale)?;
    let sq = g.square(xs);
    let ones_q1 = g.constant(Array2::from_elem((q, 1), 1.0));
    let rowsq = g.matmul(sq, ones_q1)?; // n x 1
    let ones_1n = g.constant(Array2::from_elem((1, n), 1.0));
    let left = g.matmul(rowsq, ones_1n)?; // n x n, row norms down columns
    let right = g.transpose(left);
    let xst = g.transpose(xs);
    let cross = g.matmul(xs, xst)?;
    let cross2 = g.scale(cross, -2.0);
    let sums = g.add(left, right)?;
    g.add(sums, cross2)
}

/// Graph fragment: task similarity matrix S = L L^T from raw entries via
/// an elementwise softplus restricted to the lower triangle.
pub fn similarity_matrix_graph(g: &mut Graph, l_raw: NodeId) -> Result<NodeId> {
    let (n, m) = g.shape(l_raw);
    if n != m {
        return Err(Error::Graph(format!("similarity factor must be square, got {n}x{m}")));
    }
    let sp = g.softplus(l_raw);
    let mask = g.constant(Array2::from_shape_fn((n, n), |(i, j)| f64::from(j <= i)));
    let l = g.mul(sp, mask)?;
    let lt = g.transpose(l);
    g.matmul(l, lt)
}

/// Full GP log marginal likelihood graph. Declares the inputs `mu`,
/// `log_nu`, `log_sigma2` and `log_ls_theta`; `kp_tasks` (a per-task-pair
/// similarity node) is expanded to observations through `membership` when
/// present, otherwise the covariance is the hyperparameter kernel alone.
pub fn gp_lml_graph(
    g: &mut Graph,
    theta: NodeId,
    z: NodeId,
    membership: NodeId,
    kp_tasks: Option<NodeId>,
) -> Result<NodeId> {
    let (n, p) = g.shape(theta);
    let log_ls_theta = g.input("log_ls_theta", p, 1)?;
    let q_theta = ard_sq_dist_graph(g, theta, log_ls_theta)?;
    let k_theta = g.matern32(q_theta);

    let k = match kp_tasks {
        None => k_theta,
        Some(kp) => {
            let expanded = g.matmul(membership, kp)?;
            let mt = g.transpose(membership);
            let kp_full = g.matmul(expanded, mt)?;
            g.mul(k_theta, kp_full)?
        }
    };

    let log_nu = g.scalar_input("log_nu")?;
    let nu = g.exp(log_nu);
    let scaled = g.scale_by(k, nu)?;
    let log_sigma2 = g.scalar_input("log_sigma2")?;
    let sigma2 = g.exp(log_sigma2);
    let ones_n1 = g.constant(Array2::from_elem((n, 1), 1.0));
    let noise_vec = g.scale_by(ones_n1, sigma2)?;
    let noise = g.make_diag(noise_vec)?;
    let a = g.add(scaled, noise)?;

    let l = g.cholesky(a)?;
    let mu = g.scalar_input("mu")?;
    let mu_vec = g.scale_by(ones_n1, mu)?;
    let resid = g.sub(z, mu_vec)?;
    let w = g.tri_solve(l, resid, false)?;
    let wsq = g.square(w);
    let quad_sum = g.sum(wsq);
    let quad = g.scale(quad_sum, -0.5);
    let diag = g.diag(l)?;
    let logs = g.log(diag);
    let logdet_sum = g.sum(logs);
    let logdet = g.negate(logdet_sum);
    let constant = g.constant_scalar(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln());
    let partial = g.add(quad, logdet)?;
    g.add(partial, constant)
}

/// Cached quantities for posterior queries at the target task: the noisy
/// covariance factor, the precomputed information vector, and the fixed
/// task-kernel column for the target.
pub struct GpPosterior {
    mu: f64,
    nu: f64,
    ls_theta: Vec<f64>,
    theta_obs: Array2<f64>,
    l: Array2<f64>,
    /// (K + sigma^2 I)^{-1} (z - mu).
    info: Array1<f64>,
    /// k_p(target, task of observation i), one entry per observation.
    kp_row: Array1<f64>,
    /// k_p(target, target): prior variance is nu times this.
    kp_self: f64,
}

impl GpPosterior {
    /// Posterior with no observations: the prior (mu, nu).
    pub fn prior(mu: f64, nu: f64, theta_dim: usize) -> Self {
        GpPosterior {
            mu,
            nu,
            ls_theta: vec![1.0; theta_dim],
            theta_obs: Array2::zeros((0, theta_dim)),
            l: Array2::zeros((0, 0)),
            info: Array1::zeros(0),
            kp_row: Array1::zeros(0),
            kp_self: 1.0,
        }
    }

    pub(super) fn build(pooled: &PooledObservations, fitted: &FittedSurrogate) -> Result<Self> {
        let params = &fitted.params;
        let mu = params.scalar("mu");
        let nu = params.scalar("log_nu").exp();
        let sigma2 = params.scalar("log_sigma2").exp();
        let ls_theta: Vec<f64> = params.get("log_ls_theta").iter().map(|v| v.exp()).collect();

        let n = pooled.obs.len();
        let (kp_tasks, kp_self_idx) = match fitted.kind {
            SurrogateKind::PlainGP => (None, 0),
            SurrogateKind::MultiGP => {
                let (_, s) = task_similarity(&params.get("task_l_raw").view());
                (Some(s), fitted.target)
            }
            _ => {
                let ls_task: Vec<f64> =
                    params.get("log_ls_task").iter().map(|v| v.exp()).collect();
                let nt = fitted.task_vectors.len();
                let mut s = Array2::zeros((nt, nt));
                for i in 0..nt {
                    for j in 0..nt {
                        s[[i, j]] = matern32_ard(
                            &fitted.task_vectors[i],
                            &fitted.task_vectors[j],
                            &ls_task,
                        );
                    }
                }
                (Some(s), fitted.target)
            }
        };

        let mut a = matern_gram(&pooled.theta.view(), &pooled.theta.view(), &ls_theta);
        if let Some(kp) = &kp_tasks {
            for i in 0..n {
                for j in 0..n {
                    a[[i, j]] *= kp[[pooled.obs[i].task, pooled.obs[j].task]];
                }
            }
        }
        a *= nu;
        for i in 0..n {
            a[[i, i]] += sigma2;
        }
        let (l, _) = linalg::cholesky_jittered(&a.view())?;
        let mut resid = Array2::zeros((n, 1));
        for (i, o) in pooled.obs.iter().enumerate() {
            resid[[i, 0]] = o.z - mu;
        }
        let w = linalg::solve_lower(&l.view(), &resid.view(), false);
        let info2 = linalg::solve_lower(&l.view(), &w.view(), true);
        let info = info2.column(0).to_owned();

        let (kp_row, kp_self) = match &kp_tasks {
            None => (Array1::ones(n), 1.0),
            Some(kp) => {
                let row =
                    Array1::from_iter(pooled.obs.iter().map(|o| kp[[kp_self_idx, o.task]]));
                (row, kp[[kp_self_idx, kp_self_idx]])
            }
        };
        Ok(GpPosterior {
            mu,
            nu,
            ls_theta,
            theta_obs: pooled.theta.clone(),
            l,
            info,
            kp_row,
            kp_self,
        })
    }

    /// Batch posterior at the target task. Rows of `thetas` are
    /// standardized hyperparameter vectors.
    pub fn predict(&self, thetas: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let c = thetas.nrows();
        let n = self.theta_obs.nrows();
        let prior_var = self.nu * self.kp_self;
        if n == 0 {
            return Ok((Array1::from_elem(c, self.mu), Array1::from_elem(c, prior_var)));
        }
        let mut cross = matern_gram(thetas, &self.theta_obs.view(), &self.ls_theta);
        for i in 0..c {
            for j in 0..n {
                cross[[i, j]] *= self.nu * self.kp_row[j];
            }
        }
        let mean = Array1::from_iter(
            (0..c).map(|i| self.mu + cross.row(i).dot(&self.info)),
        );
        let v = linalg::solve_lower(&self.l.view(), &cross.t().to_owned().view(), false);
        let mut var = Array1::zeros(c);
        for i in 0..c {
            let reduction: f64 = v.column(i).iter().map(|x| x * x).sum();
            let raw = prior_var - reduction;
            if raw < -VARIANCE_TOL {
                return Err(Error::Numeric(format!(
                    "posterior variance {raw} below tolerance at query {i}"
                )));
            }
            var[i] = raw.max(0.0);
        }
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::Bindings;
    use crate::surrogates::tests::support::{gauss_jordan_inverse, log_det_lu};

    fn simple_lml_graph(n: usize, p: usize) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let theta = g.input("theta", n, p).unwrap();
        let z = g.input("z", n, 1).unwrap();
        let membership = g.constant(Array2::from_elem((n, 1), 1.0));
        let root = gp_lml_graph(&mut g, theta, z, membership, None).unwrap();
        (g, root)
    }

    fn bind_gp_scalars(b: &mut Bindings, mu: f64, nu: f64, sigma2: f64, ls: &[f64]) {
        b.set_scalar("mu", mu);
        b.set_scalar("log_nu", nu.ln());
        b.set_scalar("log_sigma2", sigma2.ln());
        b.set(
            "log_ls_theta",
            Array2::from_shape_vec((ls.len(), 1), ls.iter().map(|l| l.ln()).collect()).unwrap(),
        );
    }

    #[test]
    fn matern_value_at_unit_distance() {
        // Distance 1 with unit lengthscales: (1+sqrt(3))exp(-sqrt(3)).
        let v = matern32_ard(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]);
        let expect = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((expect - 0.4833577).abs() < 1e-7);
        assert_eq!(matern32_ard(&[2.0, -1.0], &[2.0, -1.0], &[0.5, 2.0]), 1.0);
        // Monotone decreasing in distance, bounded in (0, 1].
        let mut prev = 1.0;
        for k in 1..50 {
            let v = matern32_ard(&[k as f64 * 0.3], &[0.0], &[1.0]);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn single_observation_at_mean_with_unit_variance() {
        // One observation, mu = z, nu + sigma2 = 1: only the constant term
        // -log(2 pi)/2 survives.
        let (g, root) = simple_lml_graph(1, 1);
        let mut b = Bindings::new();
        b.set("theta", Array2::from_elem((1, 1), 0.3));
        b.set("z", Array2::from_elem((1, 1), 2.5));
        bind_gp_scalars(&mut b, 2.5, 0.6, 0.4, &[1.0]);
        let v = g.forward(root, &b).unwrap()[[0, 0]];
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn log_marginal_matches_dense_inverse_oracle() {
        // N = 10 random instance checked against an independent dense
        // computation: explicit Gauss-Jordan inverse and LU log-determinant.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 10;
        let p = 3;
        let theta = Array2::from_shape_fn((n, p), |_| rng.gen_range(-2.0..2.0));
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        let (mu, nu, sigma2) = (0.3, 1.7, 0.2);
        let ls = [0.8, 1.3, 2.1];

        let (g, root) = simple_lml_graph(n, p);
        let mut b = Bindings::new();
        b.set("theta", theta.clone());
        b.set("z", z.clone());
        bind_gp_scalars(&mut b, mu, nu, sigma2, &ls);
        let got = g.forward(root, &b).unwrap()[[0, 0]];

        let mut a = matern_gram(&theta.view(), &theta.view(), &ls);
        a *= nu;
        for i in 0..n {
            a[[i, i]] += sigma2;
        }
        let a_inv = gauss_jordan_inverse(&a);
        let resid: Vec<f64> = (0..n).map(|i| z[[i, 0]] - mu).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += resid[i] * a_inv[[i, j]] * resid[j];
            }
        }
        let expect = -0.5 * quad - 0.5 * log_det_lu(&a)
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - expect).abs() < 1e-8, "graph {got} vs oracle {expect}");
    }

    #[test]
    fn log_marginal_is_invariant_to_observation_order() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();

        let eval = |order: &[usize]| {
            let (g, root) = simple_lml_graph(n, 1);
            let mut b = Bindings::new();
            b.set(
                "theta",
                Array2::from_shape_vec((n, 1), order.iter().map(|&i| theta[i]).collect()).unwrap(),
            );
            b.set(
                "z",
                Array2::from_shape_vec((n, 1), order.iter().map(|&i| z[i]).collect()).unwrap(),
            );
            bind_gp_scalars(&mut b, 0.4, 1.0, 0.1, &[0.7]);
            g.forward(root, &b).unwrap()[[0, 0]]
        };
        let base: Vec<usize> = (0..n).collect();
        let v0 = eval(&base);
        let mut shuffled = base.clone();
        shuffled.shuffle(&mut rng);
        let v1 = eval(&shuffled);
        assert!((v0 - v1).abs() < 1e-9, "{v0} vs {v1}");
    }

    #[test]
    fn posterior_matches_dense_inverse_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let theta = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.5..1.5));
        let (mu, nu, sigma2) = (0.1, 0.9, 0.05);
        let ls = [1.1, 0.6];
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();

        let post = GpPosterior {
            mu,
            nu,
            ls_theta: ls.to_vec(),
            theta_obs: theta.clone(),
            l: {
                let mut a = matern_gram(&theta.view(), &theta.view(), &ls);
                a *= nu;
                for i in 0..n {
                    a[[i, i]] += sigma2;
                }
                linalg::cholesky(&a.view()).unwrap()
            },
            info: {
                let mut a = matern_gram(&theta.view(), &theta.view(), &ls);
                a *= nu;
                for i in 0..n {
                    a[[i, i]] += sigma2;
                }
                let a_inv = gauss_jordan_inverse(&a);
                Array1::from_iter(
                    (0..n).map(|i| (0..n).map(|j| a_inv[[i, j]] * (z[j] - mu)).sum::<f64>()),
                )
            },
            kp_row: Array1::ones(n),
            kp_self: 1.0,
        };

        let queries = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.5..1.5));
        let (mean, var) = post.predict(&queries.view()).unwrap();

        let mut a = matern_gram(&theta.view(), &theta.view(), &ls);
        a *= nu;
        for i in 0..n {
            a[[i, i]] += sigma2;
        }
        let a_inv = gauss_jordan_inverse(&a);
        for qi in 0..4 {
            let mut k = vec![0.0; n];
            for j in 0..n {
                k[j] = nu
                    * matern32_ard(
                        &queries.row(qi).to_vec(),
                        &theta.row(j).to_vec(),
                        &ls,
                    );
            }
            let mut m = mu;
            let mut red = 0.0;
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a_inv[[i, j]] * (z[j] - mu);
                    red += k[i] * a_inv[[i, j]] * k[j];
                }
                m += k[i] * acc;
            }
            let v = nu - red;
            assert!((mean[qi] - m).abs() < 1e-8);
            assert!((var[qi] - v).abs() < 1e-8);
        }
    }

    #[test]
    fn posterior_interpolates_noiseless_observations() {
        let theta = Array2::from_shape_vec((5, 1), vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let z: Vec<f64> = theta.column(0).iter().map(|&t: &f64| (t * 0.7).sin()).collect();
        let (mu, nu, sigma2) = (0.0, 1.0, 1e-12);
        let ls = [1.0];
        let mut a = matern_gram(&theta.view(), &theta.view(), &ls);
        a *= nu;
        for i in 0..5 {
            a[[i, i]] += sigma2;
        }
        let (l, _) = linalg::cholesky_jittered(&a.view()).unwrap();
        let resid = Array2::from_shape_vec((5, 1), z.clone()).unwrap();
        let w = linalg::solve_lower(&l.view(), &resid.view(), false);
        let info = linalg::solve_lower(&l.view(), &w.view(), true).column(0).to_owned();
        let post = GpPosterior {
            mu,
            nu,
            ls_theta: ls.to_vec(),
            theta_obs: theta.clone(),
            l,
            info,
            kp_row: Array1::ones(5),
            kp_self: 1.0,
        };
        let (mean, var) = post.predict(&theta.view()).unwrap();
        for i in 0..5 {
            assert!((mean[i] - z[i]).abs() < 1e-4, "mean {} vs {}", mean[i], z[i]);
            assert!(var[i] < 1e-6, "variance {} should collapse", var[i]);
        }
    }

    #[test]
    fn prior_posterior_returns_mean_and_amplitude() {
        let post = GpPosterior::prior(0.25, 2.0, 3);
        let q = Array2::zeros((2, 3));
        let (mean, var) = post.predict(&q.view()).unwrap();
        assert_eq!(mean[0], 0.25);
        assert_eq!(var[1], 2.0);
    }

    #[test]
    fn joint_kernel_gram_is_positive_semidefinite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        // 20 random joint inputs across 3 synthetic tasks.
        let n = 20;
        let theta = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-2.0..2.0));
        let tasks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
        let vecs = [
            vec![0.1, -0.4, 0.8],
            vec![0.2, 0.0, -0.3],
            vec![-0.9, 0.5, 0.1],
        ];
        let ls_t = [0.9, 1.2];
        let ls_p = [1.0, 0.8, 1.5];
        let nu = 1.3;
        let mut gram = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                gram[[i, j]] = nu
                    * matern32_ard(&theta.row(i).to_vec(), &theta.row(j).to_vec(), &ls_t)
                    * matern32_ard(&vecs[tasks[i]], &vecs[tasks[j]], &ls_p);
            }
        }
        let (vals, _) = linalg::symmetric_eigen(&gram.view());
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn similarity_factor_softplus_and_product() {
        // Hand products on a 2x2 factor, and PSD on a random one.
        let l = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let s = l.dot(&l.t());
        assert_eq!(s[[0, 1]], 1.0);
        assert_eq!(s[[1, 1]], 2.0);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-2.0..2.0));
        let (l, s) = task_similarity(&raw.view());
        for i in 0..5 {
            for j in 0..5 {
                if j > i {
                    assert_eq!(l[[i, j]], 0.0);
                } else {
                    assert!(l[[i, j]] > 0.0, "softplus keeps entries positive");
                }
                assert!(s[[i, j]] >= 0.0);
            }
        }
        let (vals, _) = linalg::symmetric_eigen(&s.view());
        assert!(vals.iter().all(|&v| v >= -1e-10));
    }
}
