//! Bayesian additive regression trees.
//!
//! Continuous responses are fit on a [−0.5, 0.5] rescaling with a conjugate
//! σ² update. Binary responses use probit data augmentation with σ ≡ 1.
//! Inclusion probabilities in (0, 1) are fit on the logit scale.

pub mod chain;
pub mod dump;
mod tree;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::glm::fit_linear;
use crate::linalg::{expit, logit, mean, sample_variance};
use crate::rng::stream;
use chain::{trunc_normal_above, Chain, Data, TreePrior};
pub use tree::{Node, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BartConfig {
    /// Number of trees.
    pub m: usize,
    /// Leaf prior spread in units of the response half-range.
    pub k: f64,
    pub nu: f64,
    /// Prior probability that σ is below the OLS estimate.
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    pub burn_in: usize,
    pub n_draws: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig { m: 200, k: 2.0, nu: 3.0, q: 0.9, alpha: 0.95, beta: 2.0, burn_in: 1000, n_draws: 200, thinning: 5, seed: 0 }
    }
}

impl BartConfig {
    pub fn probit() -> Self {
        BartConfig { m: 50, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.k > 0.0 && self.nu > 0.0) {
            return bad("beta must be >= 0; k and nu must be positive");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must lie in (0, 1)");
        }
        if self.n_draws == 0 || self.thinning == 0 {
            return bad("n_draws and thinning must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BartKind {
    Continuous,
    Probit,
    LogitTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumOfTreesState {
    pub trees: Vec<Tree>,
    /// Residual sd on the fitted scale; absent for probit.
    pub sigma: Option<f64>,
    pub iteration: usize,
}

impl SumOfTreesState {
    /// Raw sum of leaf values at one feature row.
    pub fn sum(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.eval(|v| row[v])).sum()
    }
}

/// Maps the internal fitting scale back to the modelled scale: `shift + scale·g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BartFit {
    pub kind: BartKind,
    pub n_features: usize,
    pub states: Vec<SumOfTreesState>,
    pub transform: Affine,
    pub acceptance: [f64; 3],
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BartScale {
    /// Response scale: outcome, probability or inclusion probability.
    Response,
    /// Linear-predictor scale: outcome, probit index or logit.
    Latent,
}

fn columns(x: &DMatrix<f64>) -> Data {
    Data::new((0..x.ncols()).map(|j| x.column(j).iter().copied().collect()).collect(), x.nrows())
}

fn degenerate_columns(data: &Data) -> Vec<String> {
    data.cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.iter().all(|&v| v == c[0]))
        .map(|(j, _)| format!("column {j} has a single value and is never split"))
        .collect()
}

fn check_rows(x: &DMatrix<f64>, y_len: usize) -> Result<()> {
    if x.nrows() != y_len {
        return Err(Error::LengthMismatch { expected: x.nrows(), got: y_len });
    }
    if x.nrows() < 2 {
        return Err(Error::Precondition("BART needs at least 2 rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue { field: "x".into(), reason: "non-finite feature".into() });
    }
    Ok(())
}

/// σ̂ from an OLS fit with intercept, falling back to sd(y).
fn sigma_hat(x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    match fit_linear(&design, y, None) {
        Ok(f) if f.dispersion.is_some_and(|s| s > 0.0) => f.dispersion.unwrap_or(0.0),
        _ => sample_variance(y).sqrt(),
    }
}

fn counts_to_rates(c: &chain::MoveCounts) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = if c.proposed[k] > 0 { c.accepted[k] as f64 / c.proposed[k] as f64 } else { 0.0 };
    }
    out
}

fn constant_fit(kind: BartKind, x: &DMatrix<f64>, cfg: &BartConfig, value: f64) -> BartFit {
    let state = SumOfTreesState {
        trees: vec![Tree::stump(0.0); cfg.m],
        sigma: (kind != BartKind::Probit).then_some(0.0),
        iteration: 0,
    };
    BartFit {
        kind,
        n_features: x.ncols(),
        states: vec![state; cfg.n_draws],
        transform: Affine { shift: value, scale: 1.0 },
        acceptance: [0.0; 3],
        warnings: vec!["constant response".into()],
    }
}

fn fit_gaussian(kind: BartKind, x: &DMatrix<f64>, y: &[f64], cfg: &BartConfig) -> Result<BartFit> {
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi == lo {
        return Ok(constant_fit(kind, x, cfg, lo));
    }
    let range = hi - lo;
    let yt: Vec<f64> = y.iter().map(|v| (v - lo) / range - 0.5).collect();
    let data = columns(x);
    let warnings = degenerate_columns(&data);
    let s_hat = sigma_hat(x, &yt);
    let chi = ChiSquared::new(cfg.nu).expect("positive df");
    let lambda = s_hat * s_hat * chi.inverse_cdf(1.0 - cfg.q) / cfg.nu;
    let sd_mu = 0.5 / (cfg.k * (cfg.m as f64).sqrt());
    let prior = TreePrior { alpha: cfg.alpha, beta: cfg.beta, tau: sd_mu * sd_mu };
    let mut rng = stream(cfg.seed, 0);
    let mut chain = Chain::new(&data, prior, cfg.m, mean(&yt), s_hat * s_hat);
    let total = cfg.burn_in + cfg.n_draws * cfg.thinning;
    let mut states = Vec::with_capacity(cfg.n_draws);
    for it in 0..total {
        chain.sweep(&yt, &mut rng);
        chain.draw_sigma2(&yt, cfg.nu, lambda, &mut rng);
        if it >= cfg.burn_in && (it - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
            states.push(SumOfTreesState {
                trees: chain.trees.iter().map(Tree::compact).collect(),
                sigma: Some(chain.sigma2.sqrt()),
                iteration: it,
            });
        }
    }
    Ok(BartFit {
        kind,
        n_features: x.ncols(),
        states,
        transform: Affine { shift: lo + 0.5 * range, scale: range },
        acceptance: counts_to_rates(&chain.counts),
        warnings,
    })
}

/// Sum-of-trees regression for a continuous response.
pub fn bart_fit_continuous(x: &DMatrix<f64>, y: &[f64], cfg: &BartConfig) -> Result<BartFit> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    if let Some((i, &v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::OutOfRange { index: i, value: v });
    }
    fit_gaussian(BartKind::Continuous, x, y, cfg)
}

/// Sum-of-trees regression of logit(p) for p in (0, 1).
pub fn bart_fit_logit_target(x: &DMatrix<f64>, p: &[f64], cfg: &BartConfig) -> Result<BartFit> {
    cfg.validate()?;
    check_rows(x, p.len())?;
    if let Some((i, &v)) = p.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
        return Err(Error::ResponseOutOfRange { index: i, value: v });
    }
    let l: Vec<f64> = p.iter().map(|&v| logit(v)).collect();
    fit_gaussian(BartKind::LogitTarget, x, &l, cfg)
}

/// Probit BART for a 0/1 response.
pub fn bart_fit_probit(x: &DMatrix<f64>, t: &[f64], cfg: &BartConfig) -> Result<BartFit> {
    cfg.validate()?;
    check_rows(x, t.len())?;
    if let Some((i, &v)) = t.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::OutOfRange { index: i, value: v });
    }
    let share = mean(t);
    if share == 0.0 || share == 1.0 {
        return Err(Error::SingleClass);
    }
    let offset = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(share);
    let data = columns(x);
    let warnings = degenerate_columns(&data);
    let sd_mu = 3.0 / (cfg.k * (cfg.m as f64).sqrt());
    let prior = TreePrior { alpha: cfg.alpha, beta: cfg.beta, tau: sd_mu * sd_mu };
    let mut rng = stream(cfg.seed, 0);
    let mut chain = Chain::new(&data, prior, cfg.m, 0.0, 1.0);
    let mut latent = vec![0.0; data.n];
    let total = cfg.burn_in + cfg.n_draws * cfg.thinning;
    let mut states = Vec::with_capacity(cfg.n_draws);
    for it in 0..total {
        for i in 0..data.n {
            let mu = offset + chain.fit[i];
            latent[i] = if t[i] == 1.0 {
                mu + trunc_normal_above(-mu, &mut rng)
            } else {
                mu - trunc_normal_above(mu, &mut rng)
            } - offset;
        }
        chain.sweep(&latent, &mut rng);
        if it >= cfg.burn_in && (it - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
            states.push(SumOfTreesState { trees: chain.trees.iter().map(Tree::compact).collect(), sigma: None, iteration: it });
        }
    }
    Ok(BartFit {
        kind: BartKind::Probit,
        n_features: x.ncols(),
        states,
        transform: Affine { shift: offset, scale: 1.0 },
        acceptance: counts_to_rates(&chain.counts),
        warnings,
    })
}

const PROB_CLAMP: f64 = 1e-10;

/// M × n matrix of per-draw predictions.
pub fn bart_predict(fit: &BartFit, x_new: &DMatrix<f64>, scale: BartScale) -> Result<DMatrix<f64>> {
    if x_new.ncols() != fit.n_features {
        return Err(Error::DimensionMismatch { expected: fit.n_features, got: x_new.ncols() });
    }
    let rows: Vec<Vec<f64>> = (0..x_new.nrows()).map(|i| x_new.row(i).iter().copied().collect()).collect();
    let norm = Normal::new(0.0, 1.0).expect("standard normal");
    let Affine { shift, scale: s } = fit.transform;
    Ok(DMatrix::from_fn(fit.states.len(), rows.len(), |m, i| {
        let g = shift + s * fit.states[m].sum(&rows[i]);
        match (fit.kind, scale) {
            (_, BartScale::Latent) | (BartKind::Continuous, _) => g,
            (BartKind::Probit, BartScale::Response) => norm.cdf(g).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
            (BartKind::LogitTarget, BartScale::Response) => expit(g).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        }
    }))
}

/// Residual sd on the original response scale, per draw.
pub fn sigma_draws(fit: &BartFit) -> Vec<f64> {
    fit.states.iter().map(|s| s.sigma.unwrap_or(1.0) * fit.transform.scale).collect()
}
