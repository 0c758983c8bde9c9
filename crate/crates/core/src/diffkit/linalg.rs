//! Dense linear algebra used by the tape and the inner models.
//!
//! Everything here is written against `ndarray` with the factorizations
//! blocked so the cubic work routes through `general_mat_mul` (and hence the
//! vendored matrixmultiply kernels). On the matrix sizes this crate sees
//! (a few thousand rows at most) that keeps a single core fast enough for
//! the benchmark budgets without pulling in a BLAS binding.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use ndarray::linalg::general_mat_mul;

use crate::error::{Error, Result};

/// Block size for the panel factorizations. Chosen so a block row/column of
/// f64 stays comfortably inside L1/L2; exact value is not critical.
const NB: usize = 64;

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Only the lower triangle of `a` is read. On success the result has its
/// strict upper triangle zeroed. On failure returns the 0-based index of the
/// first non-positive pivot (the order of the failing leading minor).
pub fn cholesky(a: &ArrayView2<f64>) -> std::result::Result<Array2<f64>, usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut l = a.to_owned();
    cholesky_in_place(&mut l)?;
    Ok(l)
}

/// In-place variant of [`cholesky`]; `a` becomes the lower factor.
pub fn cholesky_in_place(a: &mut Array2<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let nb = NB.min(n - k);
        // Factor the diagonal block in place.
        {
            let mut d = a.slice_mut(s![k..k + nb, k..k + nb]);
            factor_block(&mut d).map_err(|j| k + j)?;
        }
        let below = k + nb;
        if below < n {
            // Panel solve: rows below the diagonal block against L11^T.
            let (diag_cols, mut trail_cols) = a.view_mut().split_at(Axis(0), below);
            let l11 = diag_cols.slice(s![k..below, k..below]);
            let mut panel = trail_cols.slice_mut(s![.., k..below]);
            solve_panel_rows(&l11, &mut panel);
        }
        if below < n {
            // Trailing update A22 -= L21 L21^T, block column at a time and
            // only at or below the diagonal so the work stays near n^3/3.
            let (done_cols, mut trail) = a.view_mut().split_at(Axis(1), below);
            let l21 = done_cols.slice(s![below.., k..below]);
            let mut jc = 0;
            let trail_n = n - below;
            while jc < trail_n {
                let jb = NB.min(trail_n - jc);
                let lj = l21.slice(s![jc..jc + jb, ..]);
                let li = l21.slice(s![jc.., ..]);
                let mut block = trail.slice_mut(s![below + jc.., jc..jc + jb]);
                general_mat_mul(-1.0, &li, &lj.t(), 1.0, &mut block);
                jc += jb;
            }
        }
        k += nb;
    }
    // Zero the strict upper triangle so downstream code can treat the
    // result as a plain matrix.
    for i in 0..n {
        for j in i + 1..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(())
}

/// Unblocked Cholesky of a small block. Errors with the local pivot index.
fn factor_block(a: &mut ArrayViewMut2<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for t in 0..j {
            d -= a[[j, t]] * a[[j, t]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let ljj = d.sqrt();
        a[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for t in 0..j {
                v -= a[[i, t]] * a[[j, t]];
            }
            a[[i, j]] = v / ljj;
        }
    }
    Ok(())
}

/// Solve X L^T = P for X where L is a small lower-triangular block and P has
/// many rows; overwrites P. This is the panel step of the factorization.
fn solve_panel_rows(l: &ArrayView2<f64>, p: &mut ArrayViewMut2<f64>) {
    let b = l.nrows();
    for j in 0..b {
        // Split off the already-solved columns to the left of j.
        let (solved, mut rest) = p.view_mut().split_at(Axis(1), j);
        let mut col_j = rest.column_mut(0);
        for t in 0..j {
            let ljt = l[[j, t]];
            if ljt != 0.0 {
                col_j.scaled_add(-ljt, &solved.column(t));
            }
        }
        col_j.mapv_inplace(|v| v / l[[j, j]]);
    }
}

/// Solve `L x = b` (or `L^T x = b` when `transpose`) for a lower-triangular
/// `l` and a matrix of right-hand sides. Blocked so wide right-hand sides go
/// through matrix multiplication.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView2<f64>, transpose: bool) -> Array2<f64> {
    let mut x = b.to_owned();
    solve_lower_in_place(l, &mut x, transpose);
    x
}

/// In-place variant of [`solve_lower`].
pub fn solve_lower_in_place(l: &ArrayView2<f64>, x: &mut Array2<f64>, transpose: bool) {
    let n = l.nrows();
    assert_eq!(n, l.ncols(), "triangular solve needs a square factor");
    assert_eq!(n, x.nrows(), "right-hand side rows must match the factor");
    if transpose {
        // Backward substitution over block rows, last block first.
        let mut k = n;
        while k > 0 {
            let nb = NB.min(k);
            let start = k - nb;
            {
                let (mut top, bottom) = x.view_mut().split_at(Axis(0), k);
                if k < n {
                    // Subtract L[k.., start..k]^T X[k..].
                    let lpart = l.slice(s![k.., start..k]);
                    let mut rows = top.slice_mut(s![start..k, ..]);
                    general_mat_mul(-1.0, &lpart.t(), &bottom.view(), 1.0, &mut rows);
                }
            }
            let diag = l.slice(s![start..k, start..k]);
            let mut rows = x.slice_mut(s![start..k, ..]);
            solve_block_transpose(&diag, &mut rows);
            k = start;
        }
    } else {
        let mut k = 0;
        while k < n {
            let nb = NB.min(n - k);
            {
                let (done, mut rest) = x.view_mut().split_at(Axis(0), k);
                if k > 0 {
                    let lpart = l.slice(s![k..k + nb, ..k]);
                    let mut rows = rest.slice_mut(s![..nb, ..]);
                    general_mat_mul(-1.0, &lpart, &done.view(), 1.0, &mut rows);
                }
            }
            let diag = l.slice(s![k..k + nb, k..k + nb]);
            let mut rows = x.slice_mut(s![k..k + nb, ..]);
            solve_block(&diag, &mut rows);
            k += nb;
        }
    }
}

/// Unblocked forward substitution on a small diagonal block.
fn solve_block(l: &ArrayView2<f64>, x: &mut ArrayViewMut2<f64>) {
    let b = l.nrows();
    for i in 0..b {
        let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
        let mut row_i = rest.row_mut(0);
        for t in 0..i {
            let lit = l[[i, t]];
            if lit != 0.0 {
                row_i.scaled_add(-lit, &done.row(t));
            }
        }
        row_i.mapv_inplace(|v| v / l[[i, i]]);
    }
}

/// Unblocked backward substitution with the transposed block.
fn solve_block_transpose(l: &ArrayView2<f64>, x: &mut ArrayViewMut2<f64>) {
    let b = l.nrows();
    for ii in (0..b).rev() {
        let (mut head, done) = x.view_mut().split_at(Axis(0), ii + 1);
        let mut row_i = head.row_mut(ii);
        for t in ii + 1..b {
            let lti = l[[t, ii]];
            if lti != 0.0 {
                row_i.scaled_add(-lti, &done.row(t - ii - 1));
            }
        }
        row_i.mapv_inplace(|v| v / l[[ii, ii]]);
    }
}

/// Cholesky with an escalating diagonal jitter.
///
/// Starts at `1e-8 * mean(diag)` and doubles until `1e-2 * mean(diag)`;
/// returns the factor and the jitter that was actually added (0.0 when the
/// clean factorization succeeded). Gives up with a numeric failure beyond
/// the cap.
pub fn cholesky_jittered(a: &ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
    if let Ok(l) = cholesky(a) {
        return Ok((l, 0.0));
    }
    let n = a.nrows();
    let mean_diag = (0..n).map(|i| a[[i, i]]).sum::<f64>() / n.max(1) as f64;
    let scale = if mean_diag.abs() > 0.0 { mean_diag.abs() } else { 1.0 };
    let mut factor = 1e-8;
    while factor <= 1e-2 {
        let jitter = factor * scale;
        let mut aj = a.to_owned();
        for i in 0..n {
            aj[[i, i]] += jitter;
        }
        if let Ok(l) = cholesky(&aj.view()) {
            return Ok((l, jitter));
        }
        factor *= 2.0;
    }
    Err(Error::Numeric(format!(
        "matrix of order {n} not positive definite even with jitter {:.3e}",
        1e-2 * scale
    )))
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi.
///
/// Returns eigenvalues in descending order with matching columns of
/// eigenvectors. Intended for covariance matrices of a handful of features;
/// cost is O(p^3) per sweep.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigen needs a square matrix");
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-12 * (1.0 + frobenius(&m.view())) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        vecs.column_mut(new).assign(&v.column(old));
    }
    (vals, vecs)
}

fn frobenius(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let g = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut a = g.dot(&g.t());
        for i in 0..n {
            a[[i, i]] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &n in &[1usize, 3, 17, 64, 65, 130, 300] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a.view()).unwrap();
            let back = l.dot(&l.t());
            let err = (&back - &a).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-9 * n as f64, "n={n} err={err}");
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(l[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(cholesky(&a.view()).unwrap_err(), 1);
    }

    #[test]
    fn jitter_ladder_recovers_semidefinite() {
        // Rank-1 PSD matrix: plain Cholesky fails at the second pivot, the
        // ladder must rescue it with a small ridge.
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let (l, jitter) = cholesky_jittered(&a.view()).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-2);
        let back = l.dot(&l.t());
        assert!((back[[0, 1]] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn triangular_solves_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[2usize, 5, 64, 100, 129] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a.view()).unwrap();
            let b = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let x = solve_lower(&l.view(), &b.view(), false);
            let err = (&l.dot(&x) - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "forward n={n} err={err}");
            let y = solve_lower(&l.view(), &b.view(), true);
            let err = (&l.t().dot(&y) - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "transpose n={n} err={err}");
        }
    }

    #[test]
    fn eigen_diagonalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(6, &mut rng);
        let (vals, vecs) = symmetric_eigen(&a.view());
        for k in 0..6 {
            let v = vecs.column(k);
            let av = a.dot(&v);
            let err = (&av - &(&v * vals[k])).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "eigenpair {k} residual {err}");
        }
        for k in 1..6 {
            assert!(vals[k] <= vals[k - 1] + 1e-12);
        }
    }
}
