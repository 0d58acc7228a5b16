//! Small dense kernels: Cholesky solves and spectral-norm estimates.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{DdlError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DdlError::Dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for p in 0..j {
            diag -= l[[j, p]] * l[[j, p]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(DdlError::Singular(format!(
                "pivot {} is {:e} (matrix not positive definite)",
                j, diag
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower factor `L`.
pub fn cholesky_solve_factored(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for p in 0..i {
            s -= l[[i, p]] * y[p];
        }
        y[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for p in (i + 1)..n {
            s -= l[[p, i]] * y[p];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

pub fn cholesky_solve(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if b.len() != a.nrows() {
        return Err(DdlError::Dimension(format!(
            "rhs length {} vs matrix order {}",
            b.len(),
            a.nrows()
        )));
    }
    let l = cholesky(a)?;
    Ok(cholesky_solve_factored(l.view(), b))
}

/// Largest eigenvalue of a symmetric PSD matrix.
///
/// Power iteration from a fixed deterministic start, capped by the
/// Gershgorin bound. The returned value is padded by 2% so that it can be
/// used directly as a Lipschitz constant.
pub fn lipschitz_upper(gram: ArrayView2<f64>, iters: usize) -> f64 {
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    let gersh = gram
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    // fixed, non-symmetric start vector so no eigenvector is missed by construction
    let mut v = Array1::from_iter((0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64));
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut est = 0.0;
    for _ in 0..iters {
        let w = gram.dot(&v);
        let nw = w.dot(&w).sqrt();
        if nw == 0.0 {
            est = 0.0;
            break;
        }
        est = v.dot(&w);
        v = w / nw;
    }
    (est * 1.02).min(gersh).max(est)
}
