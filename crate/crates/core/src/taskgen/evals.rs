//! The inner objective models a hyperparameter evaluation actually runs:
//! ARD kernel ridge regression scored by test R² and ARD kernel logistic
//! regression scored by test AUC. Both are deterministic in their inputs.

use ndarray::{Array1, Array2};

use crate::diffkit::linalg::{cholesky, cholesky_jittered, solve_lower};
use crate::diffkit::softplus;
use crate::embeddings::Dataset;
use crate::error::{Error, Result};

use super::ard_rbf_gram;

/// IRLS stops when the objective gradient shrinks below this.
const IRLS_GRAD_TOL: f64 = 1e-6;
/// Newton iterations allowed.
const IRLS_MAX_ITERS: usize = 100;
/// Step halvings allowed per iteration before the fit counts as diverged.
const IRLS_HALVINGS: usize = 10;
/// Floor on the logistic weights p(1−p), which underflow for extreme
/// logits and would make the Newton system singular.
const IRLS_WEIGHT_FLOOR: f64 = 1e-10;

/// Fit ARD kernel ridge regression (K + αsI)c = y on the training set and
/// return the coefficient of determination R² on the test set. SST of a
/// constant test target is taken as R² = 0.
pub fn kernel_ridge_eval(
    train: &Dataset,
    test: &Dataset,
    alpha: f64,
    bandwidths: &[f64],
) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Contract(format!("ridge α must be positive, got {alpha}")));
    }
    check_bandwidths(train, test, bandwidths)?;
    let (y_train, y_test) = match (&train.y, &test.y) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Contract("kernel ridge needs labeled regression data".into())),
    };
    let s = train.x.nrows();
    let mut k = ard_rbf_gram(&train.x.view(), &train.x.view(), bandwidths);
    let ridge = alpha * s as f64;
    for i in 0..s {
        k[[i, i]] += ridge;
    }
    let (l, _) = cholesky_jittered(&k.view())?;
    let rhs = y_train.to_owned().insert_axis(ndarray::Axis(1));
    let half = solve_lower(&l.view(), &rhs.view(), false);
    let coef = solve_lower(&l.view(), &half.view(), true);
    let cross = ard_rbf_gram(&test.x.view(), &train.x.view(), bandwidths);
    let pred = cross.dot(&coef.column(0));
    Ok(r_squared(&pred, y_test))
}

fn check_bandwidths(train: &Dataset, test: &Dataset, bandwidths: &[f64]) -> Result<()> {
    if train.x.ncols() != test.x.ncols() {
        return Err(Error::Contract(format!(
            "train has {} feature dims, test has {}",
            train.x.ncols(),
            test.x.ncols()
        )));
    }
    if bandwidths.len() != train.x.ncols() {
        return Err(Error::Contract(format!(
            "{} bandwidths for {} feature dims",
            bandwidths.len(),
            train.x.ncols()
        )));
    }
    if bandwidths.iter().any(|&b| b <= 0.0 || !b.is_finite()) {
        return Err(Error::Contract("bandwidths must be positive and finite".into()));
    }
    Ok(())
}

fn r_squared(pred: &Array1<f64>, truth: &Array1<f64>) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.sum() / n;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst <= 1e-9 * n {
        return 0.0;
    }
    let sse: f64 = truth.iter().zip(pred.iter()).map(|(t, p)| (t - p).powi(2)).sum();
    1.0 - sse / sst
}

/// Fit ARD kernel logistic regression on the training set by Newton/IRLS
/// and return the AUC of the test-set scores.
///
/// The model scores points by g = Kc with dual coefficients c, minimizing
/// Σ log-loss + (1/(2C))·cᵀKc. Each Newton system is solved through the
/// symmetrized form B = W^½KW^½ + (1/C)I, which is positive definite for
/// any C > 0, and a diverging step is halved up to ten times before the
/// fit is abandoned as a numeric failure.
pub fn kernel_logistic_eval(
    train: &Dataset,
    test: &Dataset,
    c_reg: f64,
    bandwidths: &[f64],
) -> Result<f64> {
    if c_reg <= 0.0 {
        return Err(Error::Contract(format!("C must be positive, got {c_reg}")));
    }
    check_bandwidths(train, test, bandwidths)?;
    let (labels_train, labels_test) = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Contract("kernel logistic needs classification data".into())),
    };
    if labels_train.iter().any(|&l| l > 1) || labels_test.iter().any(|&l| l > 1) {
        return Err(Error::Contract("kernel logistic is binary: labels must be 0/1".into()));
    }
    let pos = labels_train.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels_train.len() {
        return Err(Error::Contract("training data must contain both classes".into()));
    }

    let s = train.x.nrows();
    let lambda = 1.0 / c_reg;
    let k = ard_rbf_gram(&train.x.view(), &train.x.view(), bandwidths);
    let y = Array1::from_iter(labels_train.iter().map(|&l| l as f64));

    let objective = |f: &Array1<f64>, c: &Array1<f64>| -> f64 {
        let loss: f64 = f.iter().zip(y.iter()).map(|(&fl, &yl)| softplus(fl) - yl * fl).sum();
        loss + 0.5 * lambda * c.dot(f)
    };

    let mut coef = Array1::<f64>::zeros(s);
    let mut f = Array1::<f64>::zeros(s);
    let mut value = objective(&f, &coef);
    for _ in 0..IRLS_MAX_ITERS {
        let p = f.mapv(|v| 0.5 * (1.0 + (0.5 * v).tanh()));
        let grad = &p - &y + &(lambda * &coef);
        if grad.dot(&grad).sqrt() < IRLS_GRAD_TOL {
            break;
        }
        let w = p.mapv(|v| (v * (1.0 - v)).max(IRLS_WEIGHT_FLOOR));
        let sw = w.mapv(f64::sqrt);
        let b_vec = &w * &f - (&p - &y);

        let mut bmat = Array2::zeros((s, s));
        for i in 0..s {
            for j in 0..s {
                bmat[[i, j]] = sw[i] * k[[i, j]] * sw[j];
            }
            bmat[[i, i]] += lambda;
        }
        let l = cholesky(&bmat.view()).map_err(|pivot| {
            Error::Numeric(format!("IRLS inner system lost definiteness at pivot {pivot}"))
        })?;
        let t = (&sw * &k.dot(&b_vec)).insert_axis(ndarray::Axis(1));
        let half = solve_lower(&l.view(), &t.view(), false);
        let u = solve_lower(&l.view(), &half.view(), true);
        let proposal = (&b_vec - &(&sw * &u.column(0))) / lambda;

        let direction = &proposal - &coef;
        let k_dir = k.dot(&direction);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=IRLS_HALVINGS {
            let c_try = &coef + &(step * &direction);
            let f_try = &f + &(step * &k_dir);
            let v_try = objective(&f_try, &c_try);
            if v_try <= value + 1e-9 * (1.0 + value.abs()) {
                coef = c_try;
                f = f_try;
                value = v_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::Numeric("IRLS diverged: no step length improved the loss".into()));
        }
    }

    let cross = ard_rbf_gram(&test.x.view(), &train.x.view(), bandwidths);
    let scores = cross.dot(&coef);
    auc(scores.as_slice().expect("contiguous scores"), labels_test)
}

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// given half credit (average ranks).
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("AUC scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("AUC labels must be 0/1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("AUC needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
