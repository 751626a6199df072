//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter ladder tried (relative to the mean absolute diagonal) when a
/// Cholesky factorisation fails: 0, 1e-10, 1e-9, ..., 1e-6.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Replace `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Cholesky factorisation with jitter escalation.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Arg(format!(
            "cholesky of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if !is_finite(m) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let n = m.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        (m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE)
    };
    for jitter in JITTER_LADDER {
        let mut trial = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                trial[(i, i)] += jitter * scale;
            }
            log::debug!("cholesky retry with jitter {:e}", jitter * scale);
        }
        if let Some(chol) = Cholesky::new(trial) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(chol);
            }
        }
    }
    Err(Error::Numerical(format!(
        "matrix of size {n} is not positive definite even with jitter"
    )))
}

/// Inverse of a symmetric positive definite matrix, symmetrised.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m)?.inverse();
    symmetrize(&mut inv);
    if !is_finite(&inv) {
        return Err(Error::Numerical("inverse has non-finite entries".into()));
    }
    Ok(inv)
}

/// `log det m` for symmetric positive definite `m`.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(m)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Lower Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky(m)?.l())
}

pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min)
}

/// Pairwise (tree) summation of `f(0) + ... + f(n-1)`.
///
/// The tree shape depends only on `n`, so the result is deterministic; the
/// halves are evaluated with `rayon::join`.
pub fn pairwise_sum<F>(n: usize, rows: usize, cols: usize, f: &F) -> DMatrix<f64>
where
    F: Fn(usize) -> DMatrix<f64> + Sync,
{
    fn rec<F>(lo: usize, hi: usize, rows: usize, cols: usize, f: &F) -> DMatrix<f64>
    where
        F: Fn(usize) -> DMatrix<f64> + Sync,
    {
        match hi - lo {
            0 => DMatrix::zeros(rows, cols),
            1 => f(lo),
            len => {
                let mid = lo + len / 2;
                let (a, b) = if len >= 64 {
                    rayon::join(|| rec(lo, mid, rows, cols, f), || rec(mid, hi, rows, cols, f))
                } else {
                    (rec(lo, mid, rows, cols, f), rec(mid, hi, rows, cols, f))
                };
                a + b
            }
        }
    }
    rec(0, n, rows, cols, f)
}

/// Numerically stable softmax of `scale * logits`.
pub fn softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| scale * l).collect();
    softmax(&scaled)
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
