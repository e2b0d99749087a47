//! Pseudo-inclusion probabilities for the non-probability sample and
//! Hájek-type weighted means.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{CombinedSample, Covariates};
use crate::error::{Error, Result};
use crate::glm::{Family, GlmFit, MAX_HALVINGS, MAX_ITER};
use crate::linalg::{cholesky_checked, expit, log1p_exp, mat_vec, select_rows, weighted_gram, xt_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PseudoMethod {
    Ipsw,
    Papw,
    Papp,
}

/// π̂ᴮ on S_B rows: one row per posterior draw (a single row for point fits).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInclusion {
    pub method: PseudoMethod,
    pub values: DMatrix<f64>,
    /// Propensities P(Z=1|·) on S_B rows, same shape as `values` (absent for IPSW).
    pub propensity: Option<DMatrix<f64>>,
}

impl PseudoInclusion {
    pub fn n_draws(&self) -> usize {
        self.values.nrows()
    }

    pub fn draw(&self, m: usize) -> Vec<f64> {
        self.values.row(m).iter().copied().collect()
    }

    /// Values of the first draw; the whole vector for point fits.
    pub fn single(&self) -> Vec<f64> {
        self.draw(0)
    }
}

/// PMLE estimating equation U(β) = Σ_B x − Σ_R expit(xβ) x / π^R.
pub fn pmle_score(x_b: &DMatrix<f64>, x_r: &DMatrix<f64>, pi_r: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let ones = vec![1.0; x_b.nrows()];
    let eta = mat_vec(x_r, beta);
    let c: Vec<f64> = eta.iter().zip(pi_r).map(|(&e, &pr)| expit(e) / pr).collect();
    xt_vec(x_b, &ones) - xt_vec(x_r, &c)
}

/// Convex potential whose negative gradient is the PMLE score.
fn pmle_potential(sum_b: &DVector<f64>, x_r: &DMatrix<f64>, pi_r: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = mat_vec(x_r, beta);
    eta.iter().zip(pi_r).map(|(&e, &pr)| log1p_exp(e) / pr).sum::<f64>() - sum_b.dot(beta)
}

/// Solve the PMLE equation from explicit S_B and S_R design matrices.
pub fn solve_pmle_matrices(x_b: &DMatrix<f64>, x_r: &DMatrix<f64>, pi_r: &[f64]) -> Result<GlmFit> {
    let n_b = x_b.nrows();
    let weight_sum: f64 = pi_r.iter().map(|p| 1.0 / p).sum();
    if weight_sum < n_b as f64 {
        return Err(Error::Infeasible { weight_sum, n_b });
    }
    let p = x_b.ncols();
    let tol = 1e-8 * n_b as f64;
    let sum_b = xt_vec(x_b, &vec![1.0; n_b]);
    let mut beta = DVector::zeros(p);
    let mut pot = pmle_potential(&sum_b, x_r, pi_r, &beta);
    let mut iterations = 0;
    loop {
        let u = pmle_score(x_b, x_r, pi_r, &beta);
        let resid = u.amax();
        let eta = mat_vec(x_r, &beta);
        let jw: Vec<f64> = eta.iter().zip(pi_r).map(|(&e, &pr)| {
            let m = expit(e);
            m * (1.0 - m) / pr
        }).collect();
        let neg_j = weighted_gram(x_r, &jw);
        let chol = cholesky_checked(&neg_j).ok_or(Error::SingularJacobian)?;
        if resid <= tol {
            let vcov = chol.inverse();
            return Ok(GlmFit {
                family: Family::Logistic,
                coefficients: beta,
                dispersion: None,
                param_vcov: Some(vcov.clone()),
                vcov: Some(vcov),
                converged: true,
                iterations,
                log_likelihood: -pot,
                n_obs: n_b + x_r.nrows(),
            });
        }
        if iterations >= MAX_ITER {
            return Err(Error::NoConvergence { iterations, residual: resid });
        }
        iterations += 1;
        let step = chol.solve(&u);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let pc = pmle_potential(&sum_b, x_r, pi_r, &cand);
            if pc.is_finite() && pc <= pot + 1e-12 * pot.abs().max(1.0) {
                beta = cand;
                pot = pc;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            return Err(Error::NoConvergence { iterations, residual: resid });
        }
    }
}

/// Split a record-ordered design into its S_B and S_R blocks.
pub fn split_rows(sample: &CombinedSample, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_b = sample.n_b();
    (x.rows(0, n_b).into_owned(), x.rows(n_b, sample.n_r()).into_owned())
}

/// PMLE for the selection model of S_B, intercept included.
pub fn solve_pmle(sample: &CombinedSample, covariates: Covariates) -> Result<GlmFit> {
    if covariates == Covariates::D {
        return Err(Error::Precondition("PMLE covariates must be X or XStar".into()));
    }
    let x = sample.design_matrix(covariates, true)?;
    let (x_b, x_r) = split_rows(sample, &x);
    solve_pmle_matrices(&x_b, &x_r, &sample.pi_r_r())
}

fn check_unit(values: &DMatrix<f64>) -> Result<()> {
    for m in 0..values.nrows() {
        for i in 0..values.ncols() {
            let v = values[(m, i)];
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::OutOfRange { index: i, value: v });
            }
        }
    }
    Ok(())
}

fn check_positive(values: &DMatrix<f64>) -> Result<()> {
    match values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        Some((k, &v)) => Err(Error::OutOfRange { index: k / values.nrows().max(1), value: v }),
        None => Ok(()),
    }
}

/// π^R · p/(1 − p) without the upper bound of [`papw`]; values may reach or exceed 1.
pub fn papw_odds(sample: &CombinedSample, p_b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pi_r = sample.pi_r_b()?;
    if p_b.ncols() != pi_r.len() {
        return Err(Error::LengthMismatch { expected: pi_r.len(), got: p_b.ncols() });
    }
    let values = DMatrix::from_fn(p_b.nrows(), p_b.ncols(), |m, i| {
        let p = p_b[(m, i)];
        pi_r[i] * p / (1.0 - p)
    });
    check_positive(&values)?;
    Ok(values)
}

/// Ê(π^R | x) · p/(1 − p) without the upper bound of [`papp`].
pub fn papp_odds(pir_b: &DMatrix<f64>, p_b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pir_b.nrows() != p_b.nrows() {
        return Err(Error::DrawCountMismatch { left: pir_b.nrows(), right: p_b.nrows() });
    }
    if pir_b.ncols() != p_b.ncols() {
        return Err(Error::LengthMismatch { expected: pir_b.ncols(), got: p_b.ncols() });
    }
    let values = pir_b.zip_map(p_b, |pr, p| pr * p / (1.0 - p));
    check_positive(&values)?;
    Ok(values)
}

/// π̂ᴮ = π^R · p/(1 − p) for known π^R on S_B; `p_b` is M × n_B.
pub fn papw(sample: &CombinedSample, p_b: &DMatrix<f64>) -> Result<PseudoInclusion> {
    let values = papw_odds(sample, p_b)?;
    check_unit(&values)?;
    Ok(PseudoInclusion { method: PseudoMethod::Papw, values, propensity: Some(p_b.clone()) })
}

/// π̂ᴮ = Ê(π^R | x) · p/(1 − p); draw m of the π^R model pairs with draw m of p.
pub fn papp(pir_b: &DMatrix<f64>, p_b: &DMatrix<f64>) -> Result<PseudoInclusion> {
    let values = papp_odds(pir_b, p_b)?;
    check_unit(&values)?;
    Ok(PseudoInclusion { method: PseudoMethod::Papp, values, propensity: Some(p_b.clone()) })
}

/// Σ wᵢ yᵢ / Σ wᵢ.
pub fn hajek_mean(y: &[f64], w: &[f64]) -> Result<f64> {
    if y.len() != w.len() {
        return Err(Error::LengthMismatch { expected: y.len(), got: w.len() });
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidValue { field: "weights".into(), reason: format!("{bad}") });
    }
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    Ok(y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw)
}

/// IPSW propensities expit(xβ̂) on S_B rows.
pub fn ipsw_inclusion(fit: &GlmFit, x_b: &DMatrix<f64>) -> Result<PseudoInclusion> {
    if x_b.ncols() != fit.n_coef() {
        return Err(Error::DimensionMismatch { expected: fit.n_coef(), got: x_b.ncols() });
    }
    let v: Vec<f64> = mat_vec(x_b, &fit.coefficients).iter().map(|&e| expit(e)).collect();
    Ok(PseudoInclusion { method: PseudoMethod::Ipsw, values: DMatrix::from_row_slice(1, v.len(), &v), propensity: None })
}

/// Hájek mean of y over S_B with weights 1/π(x; β̂).
pub fn ipsw_mean(sample: &CombinedSample, fit: &GlmFit, x_b: &DMatrix<f64>) -> Result<f64> {
    let pi = ipsw_inclusion(fit, x_b)?.single();
    let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    hajek_mean(&sample.y_b(), &w)
}

/// Pseudo-weighted Hájek mean of y over S_B for one draw.
pub fn pseudo_weighted_mean(sample: &CombinedSample, pib: &[f64]) -> Result<f64> {
    let w: Vec<f64> = pib.iter().map(|p| 1.0 / p).collect();
    hajek_mean(&sample.y_b(), &w)
}

/// Rows of a record-ordered matrix belonging to S_B.
pub fn b_rows(sample: &CombinedSample, x: &DMatrix<f64>) -> DMatrix<f64> {
    select_rows(x, &(0..sample.n_b()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_combined, UnitRecord};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample_with(pr_b: &[f64], pr_r: &[f64]) -> CombinedSample {
        let b = pr_b
            .iter()
            .enumerate()
            .map(|(i, &p)| UnitRecord::nonprob(format!("b{i}"), vec![i as f64], None, i as f64).with_pi_r(p))
            .collect();
        let r = pr_r.iter().enumerate().map(|(i, &p)| UnitRecord::reference(format!("r{i}"), vec![i as f64], None, p)).collect();
        build_combined(r, b, None).unwrap()
    }

    #[test]
    fn papw_examples() {
        let s = sample_with(&[0.1, 0.1], &[0.5]);
        let p = DMatrix::from_row_slice(1, 2, &[0.5, 0.8]);
        let v = papw(&s, &p).unwrap().single();
        assert!((v[0] - 0.1).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);
        let s = sample_with(&[0.5], &[0.5]);
        match papw(&s, &DMatrix::from_element(1, 1, 0.8)) {
            Err(Error::OutOfRange { value, .. }) => assert!((value - 2.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn papp_examples() {
        let v = papp(&DMatrix::from_element(1, 1, 0.1), &DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!((v.single()[0] - 0.1).abs() < 1e-15);
        assert_eq!(
            papp(&DMatrix::from_element(100, 3, 0.1), &DMatrix::from_element(200, 3, 0.5)),
            Err(Error::DrawCountMismatch { left: 100, right: 200 })
        );
    }

    #[test]
    fn papp_with_oracle_pir_equals_papw() {
        let mut rng = stream(4, 0);
        let pr: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.2)).collect();
        let s = sample_with(&pr, &[0.5]);
        let p = DMatrix::from_fn(3, 20, |_, _| rng.random_range(0.1..0.7));
        let a = papw(&s, &p).unwrap();
        let b = papp(&DMatrix::from_fn(3, 20, |_, i| pr[i]), &p).unwrap();
        assert!((a.values - b.values).amax() < 1e-10);
    }

    #[test]
    fn papw_recovers_true_inclusion() {
        // p = π^B/(π^B + π^R) implies π^R p/(1−p) = π^B.
        let mut rng = stream(5, 0);
        let pr: Vec<f64> = (0..50).map(|_| rng.random_range(0.001..0.3)).collect();
        let pb: Vec<f64> = (0..50).map(|_| rng.random_range(0.001..0.3)).collect();
        let s = sample_with(&pr, &[0.5]);
        let p = DMatrix::from_fn(1, 50, |_, i| pb[i] / (pb[i] + pr[i]));
        let v = papw(&s, &p).unwrap().single();
        for i in 0..50 {
            assert!((v[i] - pb[i]).abs() < 1e-12 * pb[i].max(1e-3));
        }
    }

    #[test]
    fn hajek_examples() {
        assert_eq!(hajek_mean(&[1.0, 2.0, 6.0], &[2.0, 2.0, 2.0]).unwrap(), 3.0);
        assert_eq!(hajek_mean(&[2.0, 4.0], &[1.0, 3.0]).unwrap(), 3.5);
        assert_eq!(hajek_mean(&[], &[]), Err(Error::ZeroWeightSum));
        assert_eq!(hajek_mean(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn pmle_intercept_closed_form() {
        // x ≡ 1: Σ_R expit(β)/π^R = n_B  ⇒  β = logit(n_B / N̂).
        let pr = [0.01, 0.02, 0.05, 0.01, 0.04];
        let x_b = DMatrix::from_element(3, 1, 1.0);
        let x_r = DMatrix::from_element(5, 1, 1.0);
        let f = solve_pmle_matrices(&x_b, &x_r, &pr).unwrap();
        let nhat: f64 = pr.iter().map(|p| 1.0 / p).sum();
        let q = 3.0 / nhat;
        assert!((f.coefficients[0] - (q / (1.0 - q)).ln()).abs() < 1e-9);
        let u = pmle_score(&x_b, &x_r, &pr, &f.coefficients);
        assert!(u.amax() <= 1e-8 * 3.0);
    }

    #[test]
    fn pmle_infeasible_and_singular() {
        let x_b = DMatrix::from_element(3, 1, 1.0);
        let x_r = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(solve_pmle_matrices(&x_b, &x_r, &[0.9, 0.9]), Err(Error::Infeasible { .. })));
        let x_b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let x_r = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(solve_pmle_matrices(&x_b, &x_r, &[0.1, 0.1, 0.1]), Err(Error::SingularJacobian));
    }

    #[test]
    fn pmle_root_residual_with_covariate() {
        let mut rng = stream(8, 0);
        let x_b = DMatrix::from_fn(400, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(0.0..3.0) });
        let x_r = DMatrix::from_fn(80, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(0.0..2.0) });
        let pr: Vec<f64> = (0..80).map(|_| rng.random_range(0.001..0.02)).collect();
        let f = solve_pmle_matrices(&x_b, &x_r, &pr).unwrap();
        assert!(pmle_score(&x_b, &x_r, &pr, &f.coefficients).amax() <= 1e-8 * 400.0);
    }

    #[test]
    fn ipsw_constant_is_unweighted() {
        let s = sample_with(&[0.1, 0.1, 0.1], &[0.5]);
        let fit = GlmFit {
            family: Family::Logistic,
            coefficients: DVector::from_row_slice(&[-1.0]),
            dispersion: None,
            vcov: None,
            param_vcov: None,
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            n_obs: 0,
        };
        let xb = DMatrix::from_element(3, 1, 1.0);
        assert!((ipsw_mean(&s, &fit, &xb).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hajek_scale_invariant(
            y in proptest::collection::vec(-100.0f64..100.0, 1..30),
            c in 1e-3f64..1e3,
            seed in 0u64..1000,
        ) {
            let mut rng = stream(seed, 0);
            let w: Vec<f64> = y.iter().map(|_| rng.random_range(0.01..10.0)).collect();
            let a = hajek_mean(&y, &w).unwrap();
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let b = hajek_mean(&y, &wc).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
