//! Parametric model fitting: logistic, linear and beta regression, plus a
//! random-walk Metropolis posterior sampler.

mod beta;
mod linear;
mod logistic;
mod mcmc;
pub mod special;

pub use beta::{beta_loglik, beta_score, fit_beta_regression};
pub use linear::{fit_linear, linear_loglik, linear_score};
pub use logistic::{fit_logistic, logistic_loglik, logistic_score};
pub use mcmc::{posterior_sample, McmcConfig, PosteriorDraws, Prior};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{expit, row_dot};

/// Maximum IRLS / Newton iterations.
pub const MAX_ITER: usize = 100;
/// Score tolerance per unit of total weight.
pub const SCORE_TOL: f64 = 1e-8;
/// Step-halving limit.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Family {
    Logistic,
    Linear,
    Beta,
}

impl Family {
    pub fn has_dispersion(self) -> bool {
        !matches!(self, Family::Logistic)
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Linear => eta,
            Family::Logistic | Family::Beta => expit(eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: DVector<f64>,
    /// σ for Linear, φ for Beta.
    pub dispersion: Option<f64>,
    /// Covariance of the coefficients.
    pub vcov: Option<DMatrix<f64>>,
    /// Covariance of (coefficients, log dispersion); equals `vcov` for Logistic.
    pub param_vcov: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub n_obs: usize,
}

impl GlmFit {
    pub fn n_coef(&self) -> usize {
        self.coefficients.len()
    }

    /// Conditional variance of y at a fitted mean.
    pub fn response_variance(&self, mean: f64) -> f64 {
        match self.family {
            Family::Linear => self.dispersion.unwrap_or(0.0).powi(2),
            Family::Logistic => mean * (1.0 - mean),
            Family::Beta => mean * (1.0 - mean) / (1.0 + self.dispersion.unwrap_or(f64::INFINITY)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scale {
    LinearPredictor,
    Mean,
}

fn check_width(x_new: &DMatrix<f64>, p: usize) -> Result<()> {
    if x_new.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: x_new.ncols() });
    }
    Ok(())
}

/// Predictions from a point fit.
pub fn predict(fit: &GlmFit, x_new: &DMatrix<f64>, scale: Scale) -> Result<Vec<f64>> {
    check_width(x_new, fit.n_coef())?;
    Ok((0..x_new.nrows())
        .map(|i| {
            let eta = row_dot(x_new, i, &fit.coefficients);
            match scale {
                Scale::LinearPredictor => eta,
                Scale::Mean => fit.family.inverse_link(eta),
            }
        })
        .collect())
}

/// Predictions for every posterior draw: an M × n matrix.
pub fn predict_draws(draws: &PosteriorDraws, x_new: &DMatrix<f64>, scale: Scale) -> Result<DMatrix<f64>> {
    let p = draws.n_coef();
    check_width(x_new, p)?;
    let coef = draws.draws.columns(0, p);
    let eta = coef * x_new.transpose();
    Ok(match scale {
        Scale::LinearPredictor => eta,
        Scale::Mean => eta.map(|e| draws.family.inverse_link(e)),
    })
}

pub(crate) fn check_weights(n: usize, w: Option<&[f64]>) -> Result<Vec<f64>> {
    match w {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: w.len() });
            }
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidValue { field: "weights".into(), reason: format!("{bad}") });
            }
            Ok(w.to_vec())
        }
    }
}

pub(crate) fn check_rows(x: &DMatrix<f64>, len: usize) -> Result<()> {
    if x.nrows() != len {
        return Err(Error::LengthMismatch { expected: x.nrows(), got: len });
    }
    Ok(())
}

pub(crate) fn max_abs(v: &DVector<f64>) -> f64 {
    v.amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit_with(family: Family, coef: &[f64]) -> GlmFit {
        GlmFit {
            family,
            coefficients: DVector::from_row_slice(coef),
            dispersion: None,
            vcov: None,
            param_vcov: None,
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            n_obs: 0,
        }
    }

    #[test]
    fn logistic_zero_coefficients_give_half() {
        let f = fit_with(Family::Logistic, &[0.0, 0.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 1.0, -2.0, 1.0, 0.3]);
        assert!(predict(&f, &x, Scale::Mean).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn linear_arithmetic_and_identity_link() {
        let f = fit_with(Family::Linear, &[2.0, 1.0]);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        assert_eq!(predict(&f, &x, Scale::Mean).unwrap(), vec![5.0]);
        assert_eq!(predict(&f, &x, Scale::LinearPredictor).unwrap(), vec![5.0]);
        let bad = DMatrix::from_row_slice(1, 3, &[1.0, 3.0, 0.0]);
        assert_eq!(predict(&f, &bad, Scale::Mean), Err(Error::DimensionMismatch { expected: 2, got: 3 }));
    }
}
