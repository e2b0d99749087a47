use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use super::special::trigamma;
use super::{check_rows, max_abs, Family, GlmFit, MAX_HALVINGS, MAX_ITER, SCORE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_checked, expit, logit, mat_vec, spd_inverse, weighted_gram, xt_vec};

/// Beta log-likelihood in the mean-precision form, μ = expit(xᵀγ).
pub fn beta_loglik(x: &DMatrix<f64>, y: &[f64], gamma: &DVector<f64>, phi: f64) -> f64 {
    let eta = mat_vec(x, gamma);
    let lg_phi = ln_gamma(phi);
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            let mu = expit(e);
            let a = mu * phi;
            let b = (1.0 - mu) * phi;
            lg_phi - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * yi.ln() + (b - 1.0) * (1.0 - yi).ln()
        })
        .sum()
}

/// Gradient of [`beta_loglik`] in (γ, φ).
pub fn beta_score(x: &DMatrix<f64>, y: &[f64], gamma: &DVector<f64>, phi: f64) -> DVector<f64> {
    let eta = mat_vec(x, gamma);
    let p = x.ncols();
    let psi_phi = digamma(phi);
    let mut r = Vec::with_capacity(y.len());
    let mut dphi = 0.0;
    for (&e, &yi) in eta.iter().zip(y) {
        let mu = expit(e);
        let ystar = logit(yi);
        let psi_b = digamma((1.0 - mu) * phi);
        let mustar = digamma(mu * phi) - psi_b;
        r.push(phi * (ystar - mustar) * mu * (1.0 - mu));
        dphi += mu * (ystar - mustar) + (1.0 - yi).ln() - psi_b + psi_phi;
    }
    let g = xt_vec(x, &r);
    let mut out = DVector::zeros(p + 1);
    out.rows_mut(0, p).copy_from(&g);
    out[p] = dphi;
    out
}

/// Expected information in (γ, log φ).
fn fisher_info(x: &DMatrix<f64>, gamma: &DVector<f64>, phi: f64) -> DMatrix<f64> {
    let eta = mat_vec(x, gamma);
    let p = x.ncols();
    let tg_phi = trigamma(phi);
    let mut wv = Vec::with_capacity(eta.len());
    let mut cv = Vec::with_capacity(eta.len());
    let mut dsum = 0.0;
    for &e in &eta {
        let mu = expit(e);
        let t = mu * (1.0 - mu);
        let ta = trigamma(mu * phi);
        let tb = trigamma((1.0 - mu) * phi);
        wv.push(phi * phi * (ta + tb) * t * t);
        cv.push(phi * (ta * mu - tb * (1.0 - mu)) * t);
        dsum += ta * mu * mu + tb * (1.0 - mu) * (1.0 - mu) - tg_phi;
    }
    let kgg = weighted_gram(x, &wv);
    // ∂/∂logφ = φ ∂/∂φ
    let kgp = xt_vec(x, &cv) * phi;
    let kpp = dsum * phi * phi;
    let mut info = DMatrix::zeros(p + 1, p + 1);
    info.view_mut((0, 0), (p, p)).copy_from(&kgg);
    for j in 0..p {
        info[(j, p)] = kgp[j];
        info[(p, j)] = kgp[j];
    }
    info[(p, p)] = kpp;
    info
}

fn score_log(x: &DMatrix<f64>, y: &[f64], gamma: &DVector<f64>, phi: f64) -> DVector<f64> {
    let mut s = beta_score(x, y, gamma, phi);
    let p = x.ncols();
    s[p] *= phi;
    s
}

/// Starting values: OLS on logit(y); precision from the moment formula.
fn start(x: &DMatrix<f64>, y: &[f64]) -> Result<(DVector<f64>, f64)> {
    let (n, p) = (x.nrows(), x.ncols());
    let ly: Vec<f64> = y.iter().map(|&v| logit(v)).collect();
    let ones = vec![1.0; n];
    let chol = cholesky_checked(&weighted_gram(x, &ones)).ok_or(Error::SingularDesign)?;
    let gamma = chol.solve(&xt_vec(x, &ly));
    let fit = mat_vec(x, &gamma);
    let dof = (n.saturating_sub(p)).max(1) as f64;
    let s2 = fit.iter().zip(&ly).map(|(f, l)| (l - f).powi(2)).sum::<f64>() / dof;
    let mut phi = 0.0;
    for &f in &fit {
        let mu = expit(f);
        let t = mu * (1.0 - mu);
        let var = s2 * t * t;
        phi += if var > 0.0 { t / var } else { 0.0 };
    }
    phi = phi / n as f64 - 1.0;
    if !(phi.is_finite() && phi > 0.0) {
        phi = 1.0;
    }
    Ok((gamma, phi.min(1e8)))
}

/// Beta regression MLE by Fisher scoring with backtracking on the log-likelihood.
pub fn fit_beta_regression(x: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit> {
    check_rows(x, y.len())?;
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
        return Err(Error::ResponseOutOfRange { index, value });
    }
    let (n, p) = (x.nrows(), x.ncols());
    if n <= p {
        return Err(Error::Underdetermined { rows: n, params: p });
    }
    let (mut gamma, phi0) = start(x, y)?;
    let mut lphi = phi0.ln();
    let mut ll = beta_loglik(x, y, &gamma, lphi.exp());
    let tol = SCORE_TOL * n as f64;
    let mut iterations = 0;
    let finish = |gamma: DVector<f64>, phi: f64, ll: f64, iterations: usize| {
        let info = fisher_info(x, &gamma, phi);
        let param_vcov = spd_inverse(&info).ok();
        // Coefficient block is unchanged by the log reparameterization.
        let vcov = param_vcov.as_ref().map(|v| v.view((0, 0), (p, p)).into_owned());
        GlmFit {
            family: Family::Beta,
            coefficients: gamma,
            dispersion: Some(phi),
            vcov,
            param_vcov,
            converged: true,
            iterations,
            log_likelihood: ll,
            n_obs: n,
        }
    };
    loop {
        let phi = lphi.exp();
        let s = score_log(x, y, &gamma, phi);
        let resid = max_abs(&s);
        if resid <= tol {
            return Ok(finish(gamma, phi, ll, iterations));
        }
        if iterations >= MAX_ITER {
            return Err(Error::NoConvergence { iterations, residual: resid });
        }
        iterations += 1;
        let info = fisher_info(x, &gamma, phi);
        let step = cholesky_checked(&info).map(|c| c.solve(&s)).ok_or(Error::SingularDesign)?;
        let decrement = step.dot(&s);
        if decrement <= 1e-12 * ll.abs().max(1.0) {
            return Ok(finish(gamma, phi, ll, iterations));
        }
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let g_new = &gamma + step.rows(0, p) * scale;
            let lp_new = lphi + step[p] * scale;
            if lp_new.is_finite() && lp_new < 700.0 {
                let ll_new = beta_loglik(x, y, &g_new, lp_new.exp());
                if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                    gamma = g_new;
                    lphi = lp_new;
                    ll = ll_new;
                    moved = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !moved {
            // No ascent left at working precision.
            if decrement <= 1e-10 * ll.abs().max(1.0) {
                return Ok(finish(gamma, phi, ll, iterations));
            }
            return Err(Error::NoConvergence { iterations, residual: resid });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Beta, Distribution};

    #[test]
    fn symmetric_intercept_only() {
        let y = [0.2, 0.8, 0.3, 0.7, 0.45, 0.55];
        let x = DMatrix::from_element(y.len(), 1, 1.0);
        let f = fit_beta_regression(&x, &y).unwrap();
        assert!(f.coefficients[0].abs() < 1e-6);
        assert!(f.dispersion.unwrap() > 0.0);
    }

    #[test]
    fn recovers_generating_parameters() {
        let mut rng = stream(21, 0);
        let n = 5000;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let phi = 30.0;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mu = expit(-1.0 + 0.5 * x[(i, 1)]);
                Beta::new(mu * phi, (1.0 - mu) * phi).unwrap().sample(&mut rng)
            })
            .collect();
        let f = fit_beta_regression(&x, &y).unwrap();
        assert!((f.coefficients[0] + 1.0).abs() < 0.1);
        assert!((f.coefficients[1] - 0.5).abs() < 0.1);
        assert!((f.dispersion.unwrap() / phi - 1.0).abs() < 0.15);
    }

    #[test]
    fn boundary_response_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert_eq!(
            fit_beta_regression(&x, &[0.2, 1.0, 0.5]),
            Err(Error::ResponseOutOfRange { index: 1, value: 1.0 })
        );
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = stream(13, 0);
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        for _ in 0..10 {
            let g = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let phi = rng.random_range(2.0..40.0);
            let s = beta_score(&x, &y, &g, phi);
            let h = 1e-6;
            for j in 0..3 {
                let f = |d: f64| {
                    let mut gg = g.clone();
                    let mut ph = phi;
                    if j < 2 {
                        gg[j] += d;
                    } else {
                        ph += d;
                    }
                    beta_loglik(&x, &y, &gg, ph)
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - s[j]).abs() / s[j].abs().max(1e-3) < 1e-4, "j={j} fd={fd} s={}", s[j]);
            }
        }
    }
}
