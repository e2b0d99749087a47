use nalgebra::{DMatrix, DVector};

use super::{check_rows, check_weights, max_abs, Family, GlmFit, MAX_HALVINGS, MAX_ITER, SCORE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_checked, expit, log1p_exp, mat_vec, weighted_gram, xt_vec};

const PIN_EPS: f64 = 1e-10;
const DIVERGED_NORM: f64 = 1e3;
const VCOV_INFLATION: f64 = 1e4;

/// Weighted Bernoulli log-likelihood.
pub fn logistic_loglik(x: &DMatrix<f64>, t: &[f64], w: Option<&[f64]>, beta: &DVector<f64>) -> f64 {
    let eta = mat_vec(x, beta);
    eta.iter()
        .zip(t)
        .enumerate()
        .map(|(i, (&e, &ti))| {
            let wi = w.map_or(1.0, |w| w[i]);
            wi * (ti * e - log1p_exp(e))
        })
        .sum()
}

/// Gradient of [`logistic_loglik`] in β.
pub fn logistic_score(x: &DMatrix<f64>, t: &[f64], w: Option<&[f64]>, beta: &DVector<f64>) -> DVector<f64> {
    let eta = mat_vec(x, beta);
    let r: Vec<f64> =
        eta.iter().zip(t).enumerate().map(|(i, (&e, &ti))| w.map_or(1.0, |w| w[i]) * (ti - expit(e))).collect();
    xt_vec(x, &r)
}

fn pinned(mu: &[f64], w: &[f64]) -> bool {
    mu.iter().zip(w).any(|(&m, &wi)| wi > 0.0 && !(PIN_EPS..=1.0 - PIN_EPS).contains(&m))
}

/// Largest ratio of a coefficient variance to its value under p ≡ 1/2.
fn inflation(x: &DMatrix<f64>, w: &[f64], vcov: &DMatrix<f64>) -> f64 {
    let quarter: Vec<f64> = w.iter().map(|wi| 0.25 * wi).collect();
    match cholesky_checked(&weighted_gram(x, &quarter)) {
        Some(c) => {
            let base = c.inverse();
            (0..vcov.nrows()).map(|j| vcov[(j, j)] / base[(j, j)]).fold(0.0, f64::max)
        }
        None => f64::INFINITY,
    }
}

/// Logistic regression by IRLS with step-halving.
pub fn fit_logistic(x: &DMatrix<f64>, t: &[f64], weights: Option<&[f64]>) -> Result<GlmFit> {
    irls(x, t, weights, &mut Vec::new())
}

fn irls(x: &DMatrix<f64>, t: &[f64], weights: Option<&[f64]>, trace: &mut Vec<f64>) -> Result<GlmFit> {
    check_rows(x, t.len())?;
    let w = check_weights(t.len(), weights)?;
    if let Some(bad) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidValue { field: "t".into(), reason: format!("{bad} is not 0/1") });
    }
    let (mut ones, mut zeros) = (0.0, 0.0);
    for (&ti, &wi) in t.iter().zip(&w) {
        if ti == 1.0 {
            ones += wi;
        } else {
            zeros += wi;
        }
    }
    if ones == 0.0 || zeros == 0.0 {
        return Err(Error::Separation);
    }
    let p = x.ncols();
    if cholesky_checked(&weighted_gram(x, &w)).is_none() {
        return Err(Error::SingularDesign);
    }
    let tol = SCORE_TOL * (ones + zeros).max(1.0);
    let wref = Some(w.as_slice());

    let mut beta = DVector::zeros(p);
    let mut ll = logistic_loglik(x, t, wref, &beta);
    let mut iterations = 0;
    trace.push(ll);
    loop {
        let eta = mat_vec(x, &beta);
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let score = logistic_score(x, t, wref, &beta);
        let resid = max_abs(&score);
        if resid <= tol {
            let info_w: Vec<f64> = mu.iter().zip(&w).map(|(m, wi)| wi * m * (1.0 - m)).collect();
            let info = weighted_gram(x, &info_w);
            let vcov = cholesky_checked(&info).map(|c| c.inverse());
            if pinned(&mu, &w) {
                let diverged = match &vcov {
                    None => true,
                    Some(v) => beta.norm() > DIVERGED_NORM || inflation(x, &w, v) > VCOV_INFLATION,
                };
                if diverged {
                    return Err(Error::Separation);
                }
            }
            return Ok(GlmFit {
                family: Family::Logistic,
                coefficients: beta,
                dispersion: None,
                param_vcov: vcov.clone(),
                vcov,
                converged: true,
                iterations,
                log_likelihood: ll,
                n_obs: t.len(),
            });
        }
        if iterations >= MAX_ITER {
            return Err(if pinned(&mu, &w) { Error::Separation } else { Error::NoConvergence { iterations, residual: resid } });
        }
        iterations += 1;
        let info_w: Vec<f64> = mu.iter().zip(&w).map(|(m, wi)| wi * m * (1.0 - m)).collect();
        let info = weighted_gram(x, &info_w);
        let step = match cholesky_checked(&info) {
            Some(c) => c.solve(&score),
            None => return Err(if pinned(&mu, &w) { Error::Separation } else { Error::SingularDesign }),
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let ll_new = logistic_loglik(x, t, wref, &cand);
            if ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = ll_new;
                trace.push(ll);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations, residual: resid });
        }
        let mu_new: Vec<f64> = mat_vec(x, &beta).iter().map(|&e| expit(e)).collect();
        if pinned(&mu_new, &w) && beta.norm() > DIVERGED_NORM {
            return Err(Error::Separation);
        }
    }
}
