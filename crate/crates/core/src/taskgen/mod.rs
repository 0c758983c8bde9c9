//! Synthetic benchmark tasks and their inner objective models.
//!
//! Three generative families: a 1-d unsupervised toy problem whose optimum
//! is the sample mean, a regression family with a three-variable
//! interaction that is invisible to marginal and pairwise statistics, and
//! a classification family sampled from random-Fourier-feature logistic
//! models with per-task kernel bandwidths. The inner objectives (what a
//! hyperparameter evaluation actually runs) are ARD kernel ridge
//! regression scored by R² and ARD kernel logistic regression scored by
//! AUC. CSV ingestion and a subprocess adapter cover externally supplied
//! tasks.

pub mod evals;
pub mod external;
pub mod io;
pub mod rff;

pub use evals::{auc, kernel_logistic_eval, kernel_ridge_eval};
pub use external::{external_objective_eval, ExternalObjective};
pub use io::{load_csv_dataset, CsvSchema, LoadedCsv};
pub use rff::{gen_rff_logistic_task, RffModel, RffTask, RFF_FREQUENCIES};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embeddings::Dataset;
use crate::error::{Error, Result};

/// Covariate dimensions in the interaction-counterexample family.
pub const COUNTEREXAMPLE_DIMS: usize = 6;
/// Number of distinct generative processes in that family.
pub const COUNTEREXAMPLE_TASKS: usize = 4;

/// A 1-d unsupervised task: a latent mean drawn around `gamma` and `s`
/// observations of it.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub gamma: f64,
    /// Latent location, N(gamma, 1); kept for analysis, never shown to
    /// the optimizer.
    pub mu: f64,
    pub data: Dataset,
}

/// Draw a toy task: μ ~ N(γ, 1), then s samples N(μ, 1).
pub fn gen_toy_task(gamma: f64, s: usize, rng: &mut impl Rng) -> Result<ToyTask> {
    if s == 0 {
        return Err(Error::Contract("toy task needs at least one sample".into()));
    }
    let mu = gamma + rng.sample::<f64, _>(StandardNormal);
    let x = Array2::from_shape_fn((s, 1), |_| mu + rng.sample::<f64, _>(StandardNormal));
    Ok(ToyTask { gamma, mu, data: Dataset::unsupervised(x)? })
}

/// The toy objective exp(−(θ − x̄)²/2): maximized exactly at the sample
/// mean of the task's data, with value in (0, 1].
pub fn toy_objective(theta: f64, data: &Dataset) -> f64 {
    let mean = data.x.column(0).sum() / data.x.nrows() as f64;
    (-(theta - mean).powi(2) / 2.0).exp()
}

/// Draw one dataset from counterexample process `task` ∈ 1..=4.
///
/// All six covariates are N(0, 2²); dimension task+2 is then given the
/// sign of x₁x₂, which leaves it marginally N(0, 2²) and pairwise
/// independent of everything while making the three-way product
/// x₁·x₂·x_{task+2} nonnegative, so the label
/// y = ln(1 + (x₁x₂x_{task+2})³) + ε with ε ~ N(0, 0.5²) is always
/// defined. Which dimension carries the interaction is the only thing
/// that varies across the four processes.
pub fn gen_counterexample_task(task: usize, s: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if !(1..=COUNTEREXAMPLE_TASKS).contains(&task) {
        return Err(Error::Contract(format!(
            "counterexample process index must be 1..={COUNTEREXAMPLE_TASKS}, got {task}"
        )));
    }
    if s == 0 {
        return Err(Error::Contract("counterexample task needs at least one sample".into()));
    }
    let mut x =
        Array2::from_shape_fn((s, COUNTEREXAMPLE_DIMS), |_| {
            2.0 * rng.sample::<f64, _>(StandardNormal)
        });
    let col = task + 1;
    let mut y = Array1::zeros(s);
    for l in 0..s {
        let sign = (x[[l, 0]] * x[[l, 1]]).signum();
        x[[l, col]] = sign * x[[l, col]].abs();
        let prod = x[[l, 0]] * x[[l, 1]] * x[[l, col]];
        y[l] = (1.0 + prod.powi(3)).ln() + 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    Dataset::regression(x, y)
}

/// Gram matrix of the ARD squared-exponential kernel
/// k(x, x') = exp(−Σ_d (x_d − x'_d)² / (2σ_d²)) between two row sets.
///
/// Computed as exp(−‖u − v‖²) on inputs pre-scaled by 1/(σ_d√2), with the
/// squared distances assembled from row norms and one matrix product so
/// the quadratic work runs through the blocked multiply.
pub fn ard_rbf_gram(a: &ArrayView2<f64>, b: &ArrayView2<f64>, bandwidths: &[f64]) -> Array2<f64> {
    let d = a.ncols();
    assert_eq!(d, b.ncols(), "row sets must share dimensionality");
    assert_eq!(d, bandwidths.len(), "one bandwidth per dimension");
    let scale: Vec<f64> =
        bandwidths.iter().map(|s| 1.0 / (s * std::f64::consts::SQRT_2)).collect();
    let ua = scaled_rows(a, &scale);
    let ub = scaled_rows(b, &scale);
    let na: Vec<f64> = ua.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = ub.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut g = Array2::zeros((a.nrows(), b.nrows()));
    general_mat_mul(1.0, &ua, &ub.t(), 0.0, &mut g);
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let d2 = (na[i] + nb[j] - 2.0 * g[[i, j]]).max(0.0);
            g[[i, j]] = (-d2).exp();
        }
    }
    g
}

fn scaled_rows(x: &ArrayView2<f64>, scale: &[f64]) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metafeatures::excess_kurtosis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_sample_means_track_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for gamma in [0.0, 4.0] {
            let grand: f64 = (0..1000)
                .map(|_| {
                    let t = gen_toy_task(gamma, 10, &mut rng).unwrap();
                    t.data.x.column(0).sum() / 10.0
                })
                .sum::<f64>()
                / 1000.0;
            assert!((grand - gamma).abs() < 0.1, "γ={gamma}: grand mean {grand}");
        }
    }

    #[test]
    fn toy_single_sample_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = gen_toy_task(2.0, 1, &mut rng).unwrap();
        assert_eq!(t.data.x.nrows(), 1);

        let a = gen_toy_task(1.0, 20, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = gen_toy_task(1.0, 20, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.data.x, b.data.x);
    }

    #[test]
    fn toy_objective_peaks_at_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = gen_toy_task(-0.25, 100, &mut rng).unwrap();
        let mean = t.data.x.column(0).sum() / 100.0;
        assert_eq!(toy_objective(mean, &t.data), 1.0);
        let off = toy_objective(mean + 1.0, &t.data);
        assert!((off - (-0.5f64).exp()).abs() < 1e-12);
        let right = toy_objective(mean + 0.7, &t.data);
        let left = toy_objective(mean - 0.7, &t.data);
        assert!((right - left).abs() < 1e-12, "symmetric about the sample mean: {right} vs {left}");

        let grid = 10_000;
        let step = 16.0 / grid as f64;
        let argmax = (0..=grid)
            .map(|k| -8.0 + k as f64 * step)
            .max_by(|a, b| {
                toy_objective(*a, &t.data).partial_cmp(&toy_objective(*b, &t.data)).unwrap()
            })
            .unwrap();
        assert!((argmax - mean).abs() <= step);
    }

    #[test]
    fn counterexample_sign_identity_holds_row_by_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for task in 1..=COUNTEREXAMPLE_TASKS {
            let d = gen_counterexample_task(task, 2000, &mut rng).unwrap();
            for l in 0..2000 {
                let s12 = (d.x[[l, 0]] * d.x[[l, 1]]).signum();
                assert_eq!(d.x[[l, task + 1]].signum(), s12, "task {task} row {l}");
            }
        }
    }

    #[test]
    fn counterexample_dims_stay_pairwise_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = 1_000_000;
        let d = gen_counterexample_task(2, s, &mut rng).unwrap();
        let n = s as f64;
        let means: Vec<f64> =
            (0..COUNTEREXAMPLE_DIMS).map(|j| d.x.column(j).sum() / n).collect();
        let sds: Vec<f64> = (0..COUNTEREXAMPLE_DIMS)
            .map(|j| {
                (d.x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        for a in 0..COUNTEREXAMPLE_DIMS {
            for b in a + 1..COUNTEREXAMPLE_DIMS {
                let cov = d
                    .x
                    .column(a)
                    .iter()
                    .zip(d.x.column(b).iter())
                    .map(|(&u, &v)| (u - means[a]) * (v - means[b]))
                    .sum::<f64>()
                    / n;
                let corr = cov / (sds[a] * sds[b]);
                assert!(corr.abs() < 0.01, "dims {a},{b}: corr {corr}");
            }
        }
    }

    #[test]
    fn counterexample_modified_dim_keeps_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = 100_000;
        let d = gen_counterexample_task(1, s, &mut rng).unwrap();
        let modified: Vec<f64> = d.x.column(2).to_vec();
        let untouched: Vec<f64> = d.x.column(5).to_vec();
        let (km, ku) = (excess_kurtosis(&modified), excess_kurtosis(&untouched));
        assert!((km - ku).abs() < 0.1, "kurtosis {km} vs {ku}");
        let sd_m = (modified.iter().map(|v| v * v).sum::<f64>() / s as f64).sqrt();
        assert!((sd_m - 2.0).abs() < 0.05, "marginal std stays 2, got {sd_m}");
    }

    #[test]
    fn ard_gram_matches_hand_value() {
        let a = ndarray::array![[1.0, 2.0], [0.0, -1.0]];
        let bw = [0.5, 2.0];
        let g = ard_rbf_gram(&a.view(), &a.view(), &bw);
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[1, 1]], 1.0);
        let expect = (-(1.0f64 / (2.0 * 0.25) + 9.0 / (2.0 * 4.0))).exp();
        assert!((g[[0, 1]] - expect).abs() < 1e-14);
        assert!((g[[0, 1]] - g[[1, 0]]).abs() < 1e-15);
    }
}
