use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{check_rows, check_weights, Family, GlmFit};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_checked, mat_vec, weighted_gram, xt_vec};

/// Weighted Gaussian log-likelihood at (θ, σ).
pub fn linear_loglik(x: &DMatrix<f64>, y: &[f64], w: Option<&[f64]>, theta: &DVector<f64>, sigma: f64) -> f64 {
    let fit = mat_vec(x, theta);
    let s2 = sigma * sigma;
    fit.iter()
        .zip(y)
        .enumerate()
        .map(|(i, (&f, &yi))| {
            let wi = w.map_or(1.0, |w| w[i]);
            wi * (-0.5 * (2.0 * PI * s2).ln() - (yi - f).powi(2) / (2.0 * s2))
        })
        .sum()
}

/// Gradient of [`linear_loglik`] in (θ, σ).
pub fn linear_score(x: &DMatrix<f64>, y: &[f64], w: Option<&[f64]>, theta: &DVector<f64>, sigma: f64) -> DVector<f64> {
    let fit = mat_vec(x, theta);
    let s2 = sigma * sigma;
    let mut r = Vec::with_capacity(y.len());
    let mut ds = 0.0;
    for (i, (&f, &yi)) in fit.iter().zip(y).enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        let e = yi - f;
        r.push(wi * e / s2);
        ds += wi * (-1.0 / sigma + e * e / (s2 * sigma));
    }
    let g = xt_vec(x, &r);
    let mut out = DVector::zeros(g.len() + 1);
    out.rows_mut(0, g.len()).copy_from(&g);
    out[g.len()] = ds;
    out
}

/// Weighted least squares with σ̂² = RSS/(n − p).
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<GlmFit> {
    check_rows(x, y.len())?;
    let w = check_weights(y.len(), weights)?;
    let (n, p) = (x.nrows(), x.ncols());
    if n <= p {
        return Err(Error::Underdetermined { rows: n, params: p });
    }
    let gram = weighted_gram(x, &w);
    let chol = cholesky_checked(&gram).ok_or(Error::SingularDesign)?;
    let wy: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a * b).collect();
    let theta = chol.solve(&xt_vec(x, &wy));
    let fit = mat_vec(x, &theta);
    let rss: f64 = fit.iter().zip(y).zip(&w).map(|((f, yi), wi)| wi * (yi - f).powi(2)).sum();
    let s2 = rss / (n - p) as f64;
    let sigma = s2.sqrt();
    let wsum: f64 = w.iter().sum();
    let log_likelihood = if rss > 0.0 {
        let s2_ml = rss / wsum;
        -0.5 * wsum * ((2.0 * PI * s2_ml).ln() + 1.0)
    } else {
        f64::INFINITY
    };
    let vcov = chol.inverse() * s2;
    let mut param_vcov = DMatrix::zeros(p + 1, p + 1);
    param_vcov.view_mut((0, 0), (p, p)).copy_from(&vcov);
    param_vcov[(p, p)] = 1.0 / (2.0 * wsum);
    Ok(GlmFit {
        family: Family::Linear,
        coefficients: theta,
        dispersion: Some(sigma),
        vcov: Some(vcov),
        param_vcov: Some(param_vcov),
        converged: true,
        iterations: 1,
        log_likelihood,
        n_obs: n,
    })
}
