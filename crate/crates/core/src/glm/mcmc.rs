//! Random-walk Metropolis sampler centred on the MLE.
//!
//! Parameters are sampled on an unconstrained scale: coefficients as is and
//! the dispersion (σ or φ) on the log scale. Coefficients and the log
//! dispersion are updated as two Metropolis blocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{beta_loglik, fit_beta_regression, fit_linear, fit_logistic, linear_loglik, logistic_loglik, Family, GlmFit};
use crate::error::{Error, Result};
use crate::linalg::cholesky_checked;
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// Improper flat prior on coefficients and on the log dispersion.
    Flat,
    /// Independent N(0, sd²) on coefficients; log dispersion stays flat.
    Normal { sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Number of retained draws.
    pub n_draws: usize,
    pub burn_in: usize,
    /// Keep every `thinning`-th iteration after burn-in.
    pub thinning: usize,
    pub proposal_scale: f64,
    pub seed: u64,
    pub prior: Prior,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig { n_draws: 200, burn_in: 1000, thinning: 5, proposal_scale: 2.38, seed: 0, prior: Prior::Flat }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub family: Family,
    /// M × (p + dispersion); dispersion on its natural scale.
    pub draws: DMatrix<f64>,
    pub burn_in: usize,
    pub thinning: usize,
    pub acceptance_rate: f64,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.draws.ncols() - self.family.has_dispersion() as usize
    }

    pub fn coefficients(&self, m: usize) -> DVector<f64> {
        self.draws.row(m).columns(0, self.n_coef()).transpose()
    }

    pub fn dispersion(&self, m: usize) -> Option<f64> {
        self.family.has_dispersion().then(|| self.draws[(m, self.draws.ncols() - 1)])
    }
}

const MIN_ACCEPT: f64 = 0.01;

struct Target<'a> {
    family: Family,
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    prior: Prior,
}

impl Target<'_> {
    fn log_post(&self, theta: &DVector<f64>) -> f64 {
        let p = self.x.ncols();
        let coef = theta.rows(0, p).into_owned();
        let ll = match self.family {
            Family::Logistic => logistic_loglik(self.x, self.y, None, &coef),
            Family::Linear => linear_loglik(self.x, self.y, None, &coef, theta[p].exp()),
            Family::Beta => beta_loglik(self.x, self.y, &coef, theta[p].exp()),
        };
        let lp = match self.prior {
            Prior::Flat => 0.0,
            Prior::Normal { sd } => -0.5 * coef.norm_squared() / (sd * sd),
        };
        if ll.is_nan() {
            f64::NEG_INFINITY
        } else {
            ll + lp
        }
    }
}

fn mle(family: Family, x: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit> {
    match family {
        Family::Logistic => fit_logistic(x, y, None),
        Family::Linear => fit_linear(x, y, None),
        Family::Beta => fit_beta_regression(x, y),
    }
}

struct Block {
    start: usize,
    len: usize,
    chol: DMatrix<f64>,
}

impl Block {
    fn new(v: &DMatrix<f64>, start: usize, len: usize, scale: f64) -> Result<Self> {
        let sub = v.view((start, start), (len, len)).into_owned() * (scale * scale / len as f64);
        let chol = cholesky_checked(&sub).ok_or(Error::SingularMatrix)?;
        Ok(Block { start, len, chol: chol.l() })
    }

    fn propose(&self, cur: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.chol * z;
        let mut out = cur.clone();
        for j in 0..self.len {
            out[self.start + j] += step[j];
        }
        out
    }
}

/// Posterior draws under flat priors, initialised at the MLE.
pub fn posterior_sample(family: Family, x: &DMatrix<f64>, response: &[f64], config: &McmcConfig) -> Result<PosteriorDraws> {
    if config.n_draws == 0 {
        return Err(Error::Precondition("n_draws must be at least 1".into()));
    }
    if config.thinning == 0 {
        return Err(Error::Precondition("thinning must be at least 1".into()));
    }
    let fit = mle(family, x, response)?;
    let p = x.ncols();
    let disp = family.has_dispersion() as usize;
    let mut v = fit.param_vcov.clone().ok_or(Error::SingularMatrix)?;
    let mut cur = DVector::zeros(p + disp);
    cur.rows_mut(0, p).copy_from(&fit.coefficients);
    if disp == 1 {
        let d = fit.dispersion.expect("dispersion family");
        let floor = 1e-10 * (1.0 + response.iter().map(|v| v.abs()).fold(0.0, f64::max));
        cur[p] = d.max(floor).ln();
        if fit.dispersion == Some(0.0) || d < floor {
            // Exact fit: coefficient covariance vanishes; rescale it to the floor.
            let inv = cholesky_checked(&crate::linalg::weighted_gram(x, &vec![1.0; x.nrows()]))
                .ok_or(Error::SingularDesign)?
                .inverse();
            v.view_mut((0, 0), (p, p)).copy_from(&(inv * floor * floor));
        }
    }
    let mut blocks = vec![Block::new(&v, 0, p, config.proposal_scale)?];
    if disp == 1 {
        blocks.push(Block::new(&v, p, 1, config.proposal_scale)?);
    }
    let target = Target { family, x, y: response, prior: config.prior };
    let mut rng = stream(config.seed, 0);
    let mut lp = target.log_post(&cur);
    let total = config.burn_in + config.n_draws * config.thinning;
    let mut draws = DMatrix::zeros(config.n_draws, p + disp);
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let mut kept = 0;
    for it in 0..total {
        for b in &blocks {
            let cand = b.propose(&cur, &mut rng);
            let lp_c = target.log_post(&cand);
            let u: f64 = rng.random();
            proposed += 1;
            if lp_c.is_finite() && u.ln() < lp_c - lp {
                cur = cand;
                lp = lp_c;
                accepted += 1;
            }
        }
        if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thinning) {
            for j in 0..p {
                draws[(kept, j)] = cur[j];
            }
            if disp == 1 {
                draws[(kept, p)] = cur[p].exp();
            }
            kept += 1;
        }
    }
    let acceptance_rate = accepted as f64 / proposed as f64;
    if acceptance_rate < MIN_ACCEPT {
        return Err(Error::ChainDegenerate(acceptance_rate));
    }
    Ok(PosteriorDraws { family, draws, burn_in: config.burn_in, thinning: config.thinning, acceptance_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{predict_draws, Scale};

    #[test]
    fn exact_linear_centres_on_mle() {
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / 10.0 });
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[(i, 1)]).collect();
        let cfg = McmcConfig { n_draws: 1000, thinning: 1, seed: 3, ..Default::default() };
        let d = posterior_sample(Family::Linear, &x, &y, &cfg).unwrap();
        let mle = fit_linear(&x, &y, None).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = d.draws.column(j).iter().copied().collect();
            let m = crate::linalg::mean(&col);
            let sd = crate::linalg::sample_variance(&col).sqrt();
            assert!((m - mle.coefficients[j]).abs() <= 3.0 * sd + 1e-9);
        }
        assert!(d.draws.column(2).iter().all(|&s| s > 0.0));
    }

    #[test]
    fn logistic_posterior_near_mle() {
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for g in 0..2 {
            for k in 0..4 {
                rows.extend_from_slice(&[1.0, g as f64]);
                t.push(if g == 0 { (k < 1) as u8 as f64 } else { (k < 3) as u8 as f64 });
            }
        }
        let x = DMatrix::from_row_slice(8, 2, &rows);
        // The 8-row flat-prior posterior has heavy tails; replicate the design
        // 25 times so the posterior mean sits near the MLE.
        let xr = DMatrix::from_fn(200, 2, |i, j| x[(i % 8, j)]);
        let tr: Vec<f64> = (0..200).map(|i| t[i % 8]).collect();
        let cfg = McmcConfig { n_draws: 1000, thinning: 1, seed: 9, ..Default::default() };
        let d = posterior_sample(Family::Logistic, &xr, &tr, &cfg).unwrap();
        let b1: Vec<f64> = d.draws.column(1).iter().copied().collect();
        assert!((crate::linalg::mean(&b1) - 2.0 * 3f64.ln()).abs() < 0.5);
        assert!(d.acceptance_rate > 0.05 && d.acceptance_rate <= 1.0);
    }

    #[test]
    fn eight_row_posterior_matches_beta_oracle() {
        // A flat prior on a group logit gives p ~ Beta(s, f) for s successes and
        // f failures, so E[logit p] = ψ(s) − ψ(f) and E[β₁] = 2(ψ(3) − ψ(1)) = 3.
        use statrs::function::gamma::digamma;
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for g in 0..2 {
            for k in 0..4 {
                rows.extend_from_slice(&[1.0, g as f64]);
                t.push(if g == 0 { (k < 1) as u8 as f64 } else { (k < 3) as u8 as f64 });
            }
        }
        let x = DMatrix::from_row_slice(8, 2, &rows);
        let oracle = 2.0 * (digamma(3.0) - digamma(1.0));
        let cfg = McmcConfig { n_draws: 20000, thinning: 1, seed: 2, ..Default::default() };
        let d = posterior_sample(Family::Logistic, &x, &t, &cfg).unwrap();
        let b1: Vec<f64> = d.draws.column(1).iter().copied().collect();
        assert!((crate::linalg::mean(&b1) - oracle).abs() < 0.5, "{}", crate::linalg::mean(&b1));
    }

    #[test]
    fn zero_draws_rejected() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let cfg = McmcConfig { n_draws: 0, ..Default::default() };
        assert!(matches!(
            posterior_sample(Family::Logistic, &x, &[0.0, 1.0, 0.0, 1.0], &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn reproducible_and_shaped() {
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let y: Vec<f64> = (0..n).map(|i| 0.3 + 0.4 * (i as f64).sin() + 0.1 * (i as f64 * 1.7).cos()).collect();
        let cfg = McmcConfig { n_draws: 200, burn_in: 100, seed: 4, ..Default::default() };
        let a = posterior_sample(Family::Linear, &x, &y, &cfg).unwrap();
        let b = posterior_sample(Family::Linear, &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let pred = predict_draws(&a, &x, Scale::Mean).unwrap();
        assert_eq!(pred.shape(), (200, n));
    }
}
