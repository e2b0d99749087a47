//! Prediction-model and augmented inverse-propensity-weighted estimators.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{CombinedSample, OutcomeKind};
use crate::error::{Error, Result};
use crate::glm::{fit_linear, fit_logistic, MAX_HALVINGS, MAX_ITER};
use crate::linalg::{expit, lu_solve, mat_vec, select_rows};
use crate::weights::{hajek_mean, papp_odds, papw_odds};

/// Standard normal 0.975 quantile.
pub const Z975: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Diag {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub method: String,
    pub point: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n_draws_or_boot: usize,
    pub diagnostics: BTreeMap<String, Diag>,
}

impl EstimateReport {
    /// Report with a z-interval; negative variances give se = 0 and a flag.
    pub fn new(method: impl Into<String>, point: f64, variance: Option<f64>, n_draws_or_boot: usize) -> Self {
        let mut diagnostics = BTreeMap::new();
        let se = match variance {
            Some(v) if v >= 0.0 => v.sqrt(),
            Some(v) => {
                diagnostics.insert("negative_variance".into(), Diag::Num(v));
                0.0
            }
            None => {
                diagnostics.insert("variance".into(), Diag::Text("not computed".into()));
                0.0
            }
        };
        EstimateReport {
            method: method.into(),
            point,
            se,
            ci95: (point - Z975 * se, point + Z975 * se),
            n_draws_or_boot,
            diagnostics,
        }
    }

    pub fn with_diag(mut self, key: &str, value: Diag) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    KnownN,
    #[default]
    Hajek,
}

/// ȳ_PM = Σ_R ŷ/π^R ÷ Σ_R 1/π^R.
pub fn pm_point(sample: &CombinedSample, yhat_r: &[f64]) -> Result<f64> {
    let w: Vec<f64> = sample.pi_r_r().iter().map(|p| 1.0 / p).collect();
    hajek_mean(yhat_r, &w)
}

pub fn pm_estimate(sample: &CombinedSample, yhat_r: &[f64]) -> Result<EstimateReport> {
    Ok(EstimateReport::new("PM", pm_point(sample, yhat_r)?, None, 0))
}

/// Plug-in AIPW: residual term over S_B weighted by 1/π̂ᴮ plus prediction term over S_R.
pub fn aipw_point(sample: &CombinedSample, pib: &[f64], m_b: &[f64], m_r: &[f64], norm: Normalization) -> Result<f64> {
    let (n_b, n_r) = (sample.n_b(), sample.n_r());
    for (len, want) in [(pib.len(), n_b), (m_b.len(), n_b), (m_r.len(), n_r)] {
        if len != want {
            return Err(Error::LengthMismatch { expected: want, got: len });
        }
    }
    let y = sample.y_b();
    let pi_r = sample.pi_r_r();
    let t1: f64 = y.iter().zip(m_b).zip(pib).map(|((y, m), p)| (y - m) / p).sum();
    let t2: f64 = m_r.iter().zip(&pi_r).map(|(m, p)| m / p).sum();
    match norm {
        Normalization::KnownN => {
            let n = sample.population_size().ok_or(Error::MissingN)?;
            Ok((t1 + t2) / n)
        }
        Normalization::Hajek => {
            let nb: f64 = pib.iter().map(|p| 1.0 / p).sum();
            let nr: f64 = pi_r.iter().map(|p| 1.0 / p).sum();
            if nb <= 0.0 || nr <= 0.0 {
                return Err(Error::ZeroWeightSum);
            }
            Ok(t1 / nb + t2 / nr)
        }
    }
}

pub fn aipw_plugin(
    sample: &CombinedSample,
    pib: &[f64],
    m_b: &[f64],
    m_r: &[f64],
    norm: Normalization,
) -> Result<EstimateReport> {
    let point = aipw_point(sample, pib, m_b, m_r, norm)?;
    Ok(EstimateReport::new("AIPW", point, None, 0).with_diag("normalization", Diag::Text(format!("{norm:?}"))))
}

/// Compact single-sum form over S with propensities p and predictions m for all rows.
pub fn dr_single_sum(sample: &CombinedSample, p: &[f64], m: &[f64], n: f64) -> Result<f64> {
    let pi_r = sample.pi_r_all()?;
    let y = sample.y_b();
    let n_b = sample.n_b();
    let mut s = 0.0;
    for i in 0..sample.n() {
        let a = 1.0 / pi_r[i];
        s += if i < n_b { a * (1.0 - p[i]) / p[i] * (y[i] - m[i]) } else { a * m[i] };
    }
    Ok(s / n)
}

/// HT mean of y over S_R plus the augmentation term; needs y on S_R.
pub fn dr_augmented(sample: &CombinedSample, p: &[f64], m: &[f64], y_r: &[f64], n: f64) -> Result<f64> {
    let pi_r = sample.pi_r_all()?;
    let y_b = sample.y_b();
    let n_b = sample.n_b();
    let ht: f64 = y_r.iter().zip(&pi_r[n_b..]).map(|(y, p)| y / p).sum::<f64>() / n;
    let mut aug = 0.0;
    for i in 0..sample.n() {
        let (z, y) = if i < n_b { (1.0, y_b[i]) } else { (0.0, y_r[i - n_b]) };
        aug += (z / p[i] - 1.0) * (y - m[i]) / pi_r[i];
    }
    Ok(ht + aug / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub beta: DVector<f64>,
    pub theta: DVector<f64>,
    /// Propensities for all rows at β̂.
    pub p: Vec<f64>,
    /// Outcome predictions for all rows at θ̂.
    pub m: Vec<f64>,
    pub point: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl JointSolution {
    pub fn pib(&self, sample: &CombinedSample) -> Result<Vec<f64>> {
        let pr = sample.pi_r_b()?;
        Ok(pr.iter().zip(&self.p).map(|(r, p)| r * p / (1.0 - p)).collect())
    }
}

struct JointSystem<'a> {
    xq: &'a DMatrix<f64>,
    xm: &'a DMatrix<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    binary: bool,
    scale: f64,
}

impl JointSystem<'_> {
    fn mean(&self, eta: f64) -> (f64, f64, f64) {
        if self.binary {
            let m = expit(eta);
            let g1 = m * (1.0 - m);
            (m, g1, g1 * (1.0 - 2.0 * m))
        } else {
            (eta, 1.0, 0.0)
        }
    }

    fn eval(&self, beta: &DVector<f64>, theta: &DVector<f64>, jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let k = self.xq.ncols();
        let eq = mat_vec(self.xq, beta);
        let em = mat_vec(self.xm, theta);
        let mut f = DVector::zeros(2 * k);
        let mut j = jac.then(|| DMatrix::zeros(2 * k, 2 * k));
        for i in 0..self.a.len() {
            let (m, g1, g2) = self.mean(em[i]);
            let a = self.a[i] / self.scale;
            let z = self.z[i];
            let odds_inv = (-eq[i]).exp();
            let c2 = a * (z * (1.0 + odds_inv) - 1.0);
            let r = if z == 1.0 { self.y[i] - m } else { 0.0 };
            for u in 0..k {
                if z == 1.0 {
                    f[u] += a * odds_inv * r * self.xq[(i, u)];
                }
                f[k + u] += c2 * g1 * self.xm[(i, u)];
            }
            if let Some(j) = j.as_mut() {
                for u in 0..k {
                    for v in 0..k {
                        if z == 1.0 {
                            let e = a * odds_inv;
                            j[(u, v)] -= e * r * self.xq[(i, u)] * self.xq[(i, v)];
                            j[(u, k + v)] -= e * g1 * self.xq[(i, u)] * self.xm[(i, v)];
                            j[(k + u, v)] -= e * g1 * self.xm[(i, u)] * self.xq[(i, v)];
                        }
                        j[(k + u, k + v)] += c2 * g2 * self.xm[(i, u)] * self.xm[(i, v)];
                    }
                }
            }
        }
        (f, j)
    }
}

/// Jointly solve the doubly robust estimating equations in (β, θ).
///
/// `x_q` and `x_m` are record-ordered designs (intercept included) for the
/// selection and outcome models; both must have the same width.
pub fn aipw_joint(sample: &CombinedSample, x_q: &DMatrix<f64>, x_m: &DMatrix<f64>, norm: Normalization) -> Result<JointSolution> {
    let k = x_q.ncols();
    if x_m.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, got: x_m.ncols() });
    }
    let n = sample.n();
    if x_q.nrows() != n || x_m.nrows() != n {
        return Err(Error::LengthMismatch { expected: n, got: x_q.nrows().min(x_m.nrows()) });
    }
    let pi_r = sample.pi_r_all()?;
    let n_b = sample.n_b();
    let z = sample.z();
    let mut y = sample.y_b();
    y.resize(n, 0.0);
    let binary = sample.outcome() == OutcomeKind::Binary;
    let b_idx: Vec<usize> = (0..n_b).collect();
    let xb_m = select_rows(x_m, &b_idx);
    let theta0 = if binary { fit_logistic(&xb_m, &y[..n_b], None)? } else { fit_linear(&xb_m, &y[..n_b], None)? };
    let beta0 = fit_logistic(x_q, &z, None)?;
    let sys = JointSystem {
        xq: x_q,
        xm: x_m,
        a: pi_r.iter().map(|p| 1.0 / p).collect(),
        z,
        y,
        binary,
        scale: sample.n_hat_r(),
    };
    let ybar = crate::linalg::mean(&sys.y[..n_b]).abs();
    let tol = 1e-10 * (1.0 + ybar);
    let mut beta = beta0.coefficients;
    let mut theta = theta0.coefficients;
    let (mut f, _) = sys.eval(&beta, &theta, false);
    let mut iterations = 0;
    while f.amax() > tol {
        if iterations >= MAX_ITER {
            return Err(Error::NoConvergence { iterations, residual: f.amax() });
        }
        iterations += 1;
        let (_, j) = sys.eval(&beta, &theta, true);
        let step = lu_solve(&j.expect("jacobian requested"), &(-&f)).map_err(|_| Error::SingularJacobian)?;
        let merit = f.norm();
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let b2 = &beta + step.rows(0, k) * s;
            let t2 = &theta + step.rows(k, k) * s;
            let (f2, _) = sys.eval(&b2, &t2, false);
            if f2.iter().all(|v| v.is_finite()) && f2.norm() < merit {
                beta = b2;
                theta = t2;
                f = f2;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            return Err(Error::NoConvergence { iterations, residual: f.amax() });
        }
    }
    let p: Vec<f64> = mat_vec(x_q, &beta).iter().map(|&e| expit(e)).collect();
    let m: Vec<f64> = mat_vec(x_m, &theta).iter().map(|&e| if binary { expit(e) } else { e }).collect();
    let pib: Vec<f64> = (0..n_b).map(|i| pi_r[i] * p[i] / (1.0 - p[i])).collect();
    let point = aipw_point(sample, &pib, &m[..n_b], &m[n_b..], norm)?;
    Ok(JointSolution { beta, theta, p, m, point, residual: f.amax(), iterations })
}

/// Posterior draws of the nuisance quantities, record order for `y_imputed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    /// M × n outcome predictions for every row of S.
    pub y_imputed: DMatrix<f64>,
    /// M × n_B propensities P(Z=1|·) on S_B.
    pub propensity: DMatrix<f64>,
    /// M × n_B predicted reference inclusion probabilities on S_B.
    pub pir_pred: Option<DMatrix<f64>>,
}

impl DrawSet {
    pub fn n_draws(&self) -> usize {
        self.y_imputed.nrows()
    }

    fn check(&self) -> Result<()> {
        let m = self.n_draws();
        if self.propensity.nrows() != m {
            return Err(Error::DrawCountMismatch { left: m, right: self.propensity.nrows() });
        }
        if let Some(p) = &self.pir_pred {
            if p.nrows() != m {
                return Err(Error::DrawCountMismatch { left: m, right: p.nrows() });
            }
        }
        Ok(())
    }

    /// π̂ᴮ draws for the chosen route.
    pub fn pib(&self, sample: &CombinedSample, route: BayesRoute) -> Result<DMatrix<f64>> {
        self.check()?;
        Ok(match route {
            BayesRoute::PapwKnownPir => papw_odds(sample, &self.propensity)?,
            BayesRoute::PappUnknownPir => papp_odds(self.pir_pred.as_ref().ok_or(Error::MissingPirDraws)?, &self.propensity)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BayesRoute {
    PapwKnownPir,
    PappUnknownPir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesAipw {
    pub per_draw: Vec<f64>,
    pub point: f64,
}

/// Per-draw Hájek-normalized AIPW points and their average.
pub fn aipw_bayes(sample: &CombinedSample, draws: &DrawSet, route: BayesRoute) -> Result<BayesAipw> {
    let pib = draws.pib(sample, route)?;
    let n_b = sample.n_b();
    if draws.y_imputed.ncols() != sample.n() {
        return Err(Error::LengthMismatch { expected: sample.n(), got: draws.y_imputed.ncols() });
    }
    let per_draw = (0..draws.n_draws())
        .map(|m| {
            let row: Vec<f64> = draws.y_imputed.row(m).iter().copied().collect();
            let pb: Vec<f64> = pib.row(m).iter().copied().collect();
            aipw_point(sample, &pb, &row[..n_b], &row[n_b..], Normalization::Hajek)
        })
        .collect::<Result<Vec<f64>>>()?;
    let point = crate::linalg::mean(&per_draw);
    Ok(BayesAipw { per_draw, point })
}
