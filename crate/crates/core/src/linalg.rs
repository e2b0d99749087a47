//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative pivot floor used to declare a symmetric positive definite matrix singular.
const PIVOT_FLOOR: f64 = 1e-11;

/// Cholesky factorization that rejects numerically rank-deficient matrices.
///
/// nalgebra only fails on non-positive pivots; exact collinearity usually
/// leaves a pivot of order machine epsilon, so the squared diagonal of the
/// factor is checked against the original diagonal.
pub fn cholesky_checked(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    for j in 0..a.nrows() {
        let scale = a[(j, j)].abs().max(f64::MIN_POSITIVE);
        let pivot = l[(j, j)] * l[(j, j)];
        if !pivot.is_finite() || pivot <= PIVOT_FLOOR * scale {
            return None;
        }
    }
    Some(chol)
}

pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    cholesky_checked(a).map(|c| c.solve(b)).ok_or(Error::SingularMatrix)
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cholesky_checked(a).map(|c| c.inverse()).ok_or(Error::SingularMatrix)
}

/// Solve a general square system with partial-pivot LU, rejecting singular systems.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * scale) {
        return Err(Error::SingularMatrix);
    }
    lu.solve(b).ok_or(Error::SingularMatrix)
}

/// `Xᵀ diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            if xa == 0.0 {
                continue;
            }
            for b in a..p {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `Xᵀ v`.
pub fn xt_vec(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.ncols());
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for a in 0..x.ncols() {
            out[a] += x[(i, a)] * vi;
        }
    }
    out
}

pub fn row_dot(x: &DMatrix<f64>, i: usize, beta: &DVector<f64>) -> f64 {
    (0..x.ncols()).map(|a| x[(i, a)] * beta[a]).sum()
}

/// Linear predictor `X β` as a plain vector.
pub fn mat_vec(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (0..x.nrows()).map(|i| row_dot(x, i, beta)).collect()
}

/// Select a subset of rows.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Numerically stable logistic function.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n - 1` denominator (0 for fewer than two values).
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_columns_are_singular() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let g = weighted_gram(&x, &[1.0, 1.0, 1.0]);
        assert!(cholesky_checked(&g).is_none());
        assert_eq!(spd_inverse(&g), Err(Error::SingularMatrix));
    }

    #[test]
    fn expit_is_stable_at_extremes() {
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(-800.0), 0.0);
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
        assert!((log1p_exp(-800.0)).abs() < 1e-300);
    }
}
