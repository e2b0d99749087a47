//! Synthetic finite populations and their sampling designs.
//!
//! Three designs are provided:
//! - `gen_sim1`: linear outcome in four skewed covariates, reference design
//!   proportional to a size measure;
//! - `gen_sim2`: nonlinear outcome and logistic selection in a correlated
//!   Gaussian pair (d, x);
//! - `gen_sim3`: clustered population with cluster-level covariates, a
//!   continuous and a binary outcome and two-stage cluster sampling.
//!
//! Populations store covariate *bases* as columns; `SpecMasks` pick the
//! columns that make up the correct and misspecified working models.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Exp, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{build_combined, CombinedSample, OutcomeKind, UnitRecord};
use crate::error::{Error, Result};
use crate::linalg::{expit, mean};
use crate::rng::{derive, label, stream, Rng};

const PI_CLIP: f64 = 1e-8;

/// Column indices into a record's x and d vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub x: Vec<usize>,
    pub d: Vec<usize>,
}

impl FeatureSet {
    fn new(x: &[usize], d: &[usize]) -> Self {
        FeatureSet { x: x.to_vec(), d: d.to_vec() }
    }

    /// Every x and d column.
    pub fn all(p: usize, q: usize) -> FeatureSet {
        FeatureSet { x: (0..p).collect(), d: (0..q).collect() }
    }

    /// The same set without d columns.
    pub fn x_only(&self) -> FeatureSet {
        FeatureSet { x: self.x.clone(), d: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.x.len() + self.d.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Spec {
    True,
    False,
}

impl Spec {
    pub fn letter(self) -> char {
        match self {
            Spec::True => 'T',
            Spec::False => 'F',
        }
    }
}

/// Working-model covariate masks exported by each generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecMasks {
    pub qr_true: FeatureSet,
    pub qr_false: FeatureSet,
    pub pm_true: FeatureSet,
    pub pm_false: FeatureSet,
    /// Raw main effects, used as inputs for tree ensembles.
    pub main: FeatureSet,
}

impl SpecMasks {
    /// One feature set for every working model.
    pub fn uniform(fs: FeatureSet) -> SpecMasks {
        SpecMasks { qr_true: fs.clone(), qr_false: fs.clone(), pm_true: fs.clone(), pm_false: fs.clone(), main: fs }
    }

    pub fn qr(&self, s: Spec) -> &FeatureSet {
        match s {
            Spec::True => &self.qr_true,
            Spec::False => &self.qr_false,
        }
    }

    pub fn pm(&self, s: Spec) -> &FeatureSet {
        match s {
            Spec::True => &self.pm_true,
            Spec::False => &self.pm_false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub kind: OutcomeKind,
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDesign {
    pub n_alpha: usize,
    /// Cluster-level inclusion probabilities.
    pub pi_r: Vec<f64>,
    pub pi_b: Vec<f64>,
    /// Units subsampled per selected cluster.
    pub per_cluster_r: usize,
    pub per_cluster_b: usize,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTruth {
    pub scenario: String,
    pub rho: f64,
    /// Covariate basis columns, each of length N.
    pub x: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub outcomes: Vec<Outcome>,
    /// Unit-level inclusion probabilities.
    pub pi_r: Vec<f64>,
    pub pi_b: Vec<f64>,
    pub clusters: Option<ClusterDesign>,
    pub masks: SpecMasks,
}

impl PopulationTruth {
    pub fn size(&self) -> usize {
        self.pi_r.len()
    }

    pub fn outcome(&self, name: &str) -> Result<&Outcome> {
        self.outcomes
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown outcome '{name}'")))
    }

    fn record(&self, i: usize, z: u8, y: Option<f64>, pi_r: Option<f64>) -> UnitRecord {
        let x = self.x.iter().map(|c| c[i]).collect();
        let d = (!self.d.is_empty()).then(|| self.d.iter().map(|c| c[i]).collect());
        let prefix = if z == 1 { 'b' } else { 'r' };
        let mut r = UnitRecord { id: format!("{prefix}{i}"), cluster_id: None, x, d, y, pi_r, z };
        if let Some(c) = &self.clusters {
            r.cluster_id = Some(format!("c{}", i / c.n_alpha));
        }
        r
    }

    /// Records for selected population indices.
    pub fn records(&self, idx: &[usize], side: Side, outcome: &Outcome, pi_r_known: bool) -> Vec<UnitRecord> {
        idx.iter()
            .map(|&i| match side {
                Side::Reference => self.record(i, 0, None, Some(self.pi_r[i])),
                Side::NonProb => self.record(i, 1, Some(outcome.values[i]), pi_r_known.then_some(self.pi_r[i])),
            })
            .collect()
    }
}

/// Population row behind a generated record id, ignoring bootstrap suffixes.
pub fn population_index(id: &str) -> Option<usize> {
    let core = id.split('#').next()?;
    core.get(1..)?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Reference,
    NonProb,
}

/// Solve Σ expit(γ + ηᵢ) = target for γ by safeguarded Newton.
pub fn calibrate_intercept(eta: &[f64], target: f64) -> Result<f64> {
    let n = eta.len() as f64;
    if !(target > 0.0 && target < n) {
        return Err(Error::CalibrationFailed(format!("target {target} outside achievable range (0, {n})")));
    }
    let f = |g: f64| eta.iter().map(|&e| expit(g + e)).sum::<f64>() - target;
    let (emin, emax) = eta.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let t = target / n;
    let mut lo = (t / (1.0 - t)).ln() - emax - 1.0;
    let mut hi = (t / (1.0 - t)).ln() - emin + 1.0;
    let mut k = 0;
    while f(lo) > 0.0 || f(hi) < 0.0 {
        lo -= 10.0;
        hi += 10.0;
        k += 1;
        if k > 50 {
            return Err(Error::CalibrationFailed(format!("cannot bracket target {target}")));
        }
    }
    let mut g = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (mut v, mut dv) = (0.0, 0.0);
        for &e in eta {
            let p = expit(g + e);
            v += p;
            dv += p * (1.0 - p);
        }
        v -= target;
        if v.abs() <= 1e-10 * target {
            return Ok(g);
        }
        if v > 0.0 {
            hi = g;
        } else {
            lo = g;
        }
        let newton = g - v / dv;
        g = if dv > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::CalibrationFailed(format!("no convergence for target {target}")))
}

fn pop_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn check_common(n: usize, rho: f64) -> Result<()> {
    if n < 1000 {
        return Err(Error::Precondition(format!("population size {n} below 1000")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Precondition(format!("rho {rho} outside (0, 1)")));
    }
    Ok(())
}

fn outcome(name: &str, kind: OutcomeKind, values: Vec<f64>) -> Outcome {
    let m = mean(&values);
    Outcome { name: name.into(), kind, values, mean: m }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim1Config {
    pub n: usize,
    pub rho: f64,
    pub n_r: f64,
    pub n_b: f64,
}

impl Default for Sim1Config {
    fn default() -> Self {
        Sim1Config { n: 1_000_000, rho: 0.5, n_r: 100.0, n_b: 1000.0 }
    }
}

/// Linear outcome in four skewed covariates.
///
/// Reference inclusion is proportional to γ₁ + z₃ with max/min ratio 50;
/// non-probability inclusion is logistic in x. Both are calibrated to the
/// expected sample sizes.
pub fn gen_sim1(cfg: &Sim1Config, seed: u64) -> Result<PopulationTruth> {
    check_common(cfg.n, cfg.rho)?;
    let n = cfg.n;
    let mut rng = stream(derive(seed, label::POPULATION), 0);
    let ber = Bernoulli::new(0.5).expect("valid p");
    let unif = Uniform::new(0.0, 2.0).expect("valid range");
    let exp = Exp::new(1.0).expect("valid rate");
    let chi = ChiSquared::new(4.0).expect("valid df");
    let mut x = (0..4).map(|_| Vec::with_capacity(n)).collect::<Vec<_>>();
    let mut z3 = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = ber.sample(&mut rng) as u8 as f64;
        let z2 = unif.sample(&mut rng);
        let z3i = exp.sample(&mut rng);
        let z4 = chi.sample(&mut rng);
        let x1 = z1;
        let x2 = z2 + 0.3 * z1;
        let x3 = z3i + 0.2 * (x1 + x2);
        let x4 = z4 + 0.1 * (x1 + x2 + x3);
        for (c, v) in x.iter_mut().zip([x1, x2, x3, x4]) {
            c.push(v);
        }
        z3.push(z3i);
    }
    let s: Vec<f64> = (0..n).map(|i| x[0][i] + x[1][i] + x[2][i] + x[3][i]).collect();
    let sigma = pop_sd(&s) * (1.0 / (cfg.rho * cfg.rho) - 1.0).sqrt();
    let y: Vec<f64> = s.iter().map(|si| 2.0 + si + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let eta: Vec<f64> = (0..n).map(|i| 0.1 * x[0][i] + 0.2 * x[1][i] + 0.1 * x[2][i] + 0.2 * x[3][i]).collect();
    let g0 = calibrate_intercept(&eta, cfg.n_b)?;
    let pi_b: Vec<f64> = eta.iter().map(|e| expit(g0 + e)).collect();
    let (zmin, zmax) = z3.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let g1 = (zmax - 50.0 * zmin) / 49.0;
    let size: f64 = z3.iter().map(|z| g1 + z).sum();
    let pi_r: Vec<f64> = z3.iter().map(|z| (cfg.n_r * (g1 + z) / size).clamp(PI_CLIP, 1.0 - PI_CLIP)).collect();
    let all = FeatureSet::new(&[0, 1, 2, 3], &[]);
    let wrong = FeatureSet::new(&[0, 1, 2], &[]);
    Ok(PopulationTruth {
        scenario: "sim1".into(),
        rho: cfg.rho,
        x,
        d: Vec::new(),
        outcomes: vec![outcome("y", OutcomeKind::Continuous, y)],
        pi_r,
        pi_b,
        clusters: None,
        masks: SpecMasks { qr_true: all.clone(), qr_false: wrong.clone(), pm_true: all.clone(), pm_false: wrong, main: all },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fk {
    Sin,
    Exp,
    Sqr,
}

impl Fk {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Fk::Sin => x.sin(),
            Fk::Exp => (x / 2.0).exp(),
            Fk::Sqr => x * x / 3.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fk::Sin => "SIN",
            Fk::Exp => "EXP",
            Fk::Sqr => "SQR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim2Config {
    pub n: usize,
    /// corr(d, x); zero is allowed.
    pub rho: f64,
    pub fk: Fk,
    pub n_r: f64,
    pub n_b: f64,
}

impl Default for Sim2Config {
    fn default() -> Self {
        Sim2Config { n: 1_000_000, rho: 0.2, fk: Fk::Sin, n_r: 100.0, n_b: 1000.0 }
    }
}

/// Nonlinear outcome and selection in a correlated Gaussian pair.
///
/// Record basis: x = [x, f(x)], d = [d, d², x·d].
pub fn gen_sim2(cfg: &Sim2Config, seed: u64) -> Result<PopulationTruth> {
    if cfg.n < 1000 {
        return Err(Error::Precondition(format!("population size {} below 1000", cfg.n)));
    }
    if !(cfg.rho >= 0.0 && cfg.rho < 1.0) {
        return Err(Error::Precondition(format!("rho {} outside [0, 1)", cfg.rho)));
    }
    let n = cfg.n;
    let mut rng = stream(derive(seed, label::POPULATION), 0);
    let c = (1.0 - cfg.rho * cfg.rho).sqrt();
    let (mut d, mut x) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        d.push(a);
        x.push(cfg.rho * a + c * b);
    }
    let f: Vec<f64> = x.iter().map(|&v| cfg.fk.eval(v)).collect();
    let signal: Vec<f64> = (0..n).map(|i| 2.0 * f[i] - d[i] * d[i] + 0.5 * x[i] * d[i]).collect();
    let sigma = pop_sd(&signal) * 3f64.sqrt();
    let y: Vec<f64> = signal.iter().map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let eta_r: Vec<f64> = d.iter().map(|v| 0.2 * v * v).collect();
    let g0 = calibrate_intercept(&eta_r, cfg.n_r)?;
    let g1 = calibrate_intercept(&f, cfg.n_b)?;
    let pi_r = eta_r.iter().map(|e| expit(g0 + e).clamp(PI_CLIP, 1.0 - PI_CLIP)).collect();
    let pi_b = f.iter().map(|e| expit(g1 + e).clamp(PI_CLIP, 1.0 - PI_CLIP)).collect();
    let d2: Vec<f64> = d.iter().map(|v| v * v).collect();
    let xd: Vec<f64> = (0..n).map(|i| x[i] * d[i]).collect();
    let main = FeatureSet::new(&[0], &[0]);
    Ok(PopulationTruth {
        scenario: format!("sim2-{}", cfg.fk.name().to_lowercase()),
        rho: cfg.rho,
        x: vec![x, f],
        d: vec![d, d2, xd],
        outcomes: vec![outcome("y", OutcomeKind::Continuous, y)],
        pi_r,
        pi_b,
        clusters: None,
        masks: SpecMasks {
            qr_true: FeatureSet::new(&[1], &[1]),
            qr_false: main.clone(),
            pm_true: FeatureSet::new(&[1], &[1, 2]),
            pm_false: main.clone(),
            main,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Config {
    /// Number of clusters.
    pub a: usize,
    pub n_alpha: usize,
    pub rho: f64,
    /// Expected number of reference PSUs.
    pub n_r: f64,
    /// Expected number of non-probability units.
    pub n_b: f64,
    pub per_cluster_r: usize,
    pub per_cluster_b: usize,
    pub icc: f64,
}

impl Default for Sim3Config {
    fn default() -> Self {
        Sim3Config { a: 1000, n_alpha: 1000, rho: 0.8, n_r: 100.0, n_b: 10_000.0, per_cluster_r: 1, per_cluster_b: 50, icc: 0.2 }
    }
}

impl Sim3Config {
    /// Resize to `a` clusters; the expected non-probability size scales with `a`.
    pub fn with_clusters(self, a: usize) -> Self {
        Sim3Config { a, n_b: self.n_b * a as f64 / self.a as f64, ..self }
    }
}

/// Clustered population with cluster-level covariates.
///
/// Record basis: x = [x₁, x₁², x₁³, x₂, x₁x₂], d = [d]. A single random
/// effect per cluster enters both outcomes; its variance gives the target
/// intraclass correlation for the continuous outcome (unit error variance 1).
pub fn gen_sim3(cfg: &Sim3Config, seed: u64) -> Result<PopulationTruth> {
    if cfg.a < 10 || cfg.n_alpha < 2 {
        return Err(Error::Precondition(format!("need A >= 10 and n_alpha >= 2, got {} and {}", cfg.a, cfg.n_alpha)));
    }
    if !(cfg.rho >= 0.0 && cfg.rho < 1.0) {
        return Err(Error::Precondition(format!("rho {} outside [0, 1)", cfg.rho)));
    }
    if cfg.per_cluster_b > cfg.n_alpha || cfg.per_cluster_r > cfg.n_alpha {
        return Err(Error::ClusterTooSmall { size: cfg.n_alpha, requested: cfg.per_cluster_b.max(cfg.per_cluster_r) });
    }
    let r = cfg.rho;
    let cov = Matrix3::new(1.0, -r / 2.0, r, -r / 2.0, 1.0, -r / 2.0, r, -r / 2.0, 1.0);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Precondition(format!("covariance not positive definite at rho {r}")))?
        .l();
    let mut rng = stream(derive(seed, label::POPULATION), 0);
    let sd_u = (cfg.icc / (1.0 - cfg.icc)).sqrt();
    let (a, na) = (cfg.a, cfg.n_alpha);
    let mut dc = Vec::with_capacity(a);
    let mut x1c = Vec::with_capacity(a);
    let mut x2c = Vec::with_capacity(a);
    let mut u = Vec::with_capacity(a);
    for _ in 0..a {
        let zv = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let v = chol * zv + Vector3::new(0.0, 0.0, 1.0);
        dc.push(v[0]);
        x2c.push((v[1] > 0.0) as u8 as f64);
        x1c.push(v[2]);
        u.push(sd_u * rng.sample::<f64, _>(StandardNormal));
    }
    let eta_r: Vec<f64> = dc.iter().map(|d| 0.5 * d).collect();
    let eta_b: Vec<f64> =
        (0..a).map(|k| -0.1 * x1c[k] + 0.2 * x1c[k].powi(2) + 0.3 * x2c[k] - 0.4 * x1c[k] * x2c[k]).collect();
    let g0 = calibrate_intercept(&eta_r, cfg.n_r)?;
    let g1 = calibrate_intercept(&eta_b, cfg.n_b / cfg.per_cluster_b as f64)?;
    let pr_c: Vec<f64> = eta_r.iter().map(|e| expit(g0 + e).clamp(PI_CLIP, 1.0 - PI_CLIP)).collect();
    let pb_c: Vec<f64> = eta_b.iter().map(|e| expit(g1 + e).clamp(PI_CLIP, 1.0 - PI_CLIP)).collect();
    let n = a * na;
    let mut cols = (0..5).map(|_| Vec::with_capacity(n)).collect::<Vec<_>>();
    let mut d = Vec::with_capacity(n);
    let mut yc = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    let mut pi_r = Vec::with_capacity(n);
    let mut pi_b = Vec::with_capacity(n);
    let unit = Normal::new(0.0, 1.0).expect("valid sd");
    for k in 0..a {
        let (x1, x2, dk) = (x1c[k], x2c[k], dc[k]);
        let mu_c = 1.0 + 0.5 * x1 * x1 + 0.4 * x1.powi(3) - 0.3 * x2 - 0.2 * x1 * x2 - 0.1 * dk + u[k];
        let p_b = expit(-1.0 + 0.1 * x1 * x1 + 0.2 * x1.powi(3) - 0.3 * x2 - 0.4 * x1 * x2 - 0.5 * dk + u[k]);
        let r_unit = pr_c[k] * cfg.per_cluster_r as f64 / na as f64;
        let b_unit = pb_c[k] * cfg.per_cluster_b as f64 / na as f64;
        for _ in 0..na {
            for (c, v) in cols.iter_mut().zip([x1, x1 * x1, x1.powi(3), x2, x1 * x2]) {
                c.push(v);
            }
            d.push(dk);
            yc.push(mu_c + unit.sample(&mut rng));
            yb.push((rng.random::<f64>() < p_b) as u8 as f64);
            pi_r.push(r_unit);
            pi_b.push(b_unit);
        }
    }
    let main = FeatureSet::new(&[0, 3], &[0]);
    Ok(PopulationTruth {
        scenario: "sim3".into(),
        rho: cfg.rho,
        x: cols,
        d: vec![d],
        outcomes: vec![outcome("yc", OutcomeKind::Continuous, yc), outcome("yb", OutcomeKind::Binary, yb)],
        pi_r,
        pi_b,
        clusters: Some(ClusterDesign {
            n_alpha: na,
            pi_r: pr_c,
            pi_b: pb_c,
            per_cluster_r: cfg.per_cluster_r,
            per_cluster_b: cfg.per_cluster_b,
            u,
        }),
        masks: SpecMasks {
            qr_true: FeatureSet::new(&[0, 1, 2, 3, 4], &[0]),
            qr_false: main.clone(),
            pm_true: FeatureSet::new(&[0, 1, 2, 3, 4], &[0]),
            pm_false: main.clone(),
            main,
        },
    })
}

/// Independent Bernoulli(πᵢ) inclusion.
pub fn poisson_indices(pi: &[f64], rng: &mut Rng) -> Vec<usize> {
    pi.iter().enumerate().filter(|(_, &p)| rng.random::<f64>() < p).map(|(i, _)| i).collect()
}

pub fn poisson_sample(pop: &PopulationTruth, side: Side, outcome: &Outcome, pi_r_known: bool, seed: u64) -> Vec<UnitRecord> {
    let (pi, lab) = match side {
        Side::Reference => (&pop.pi_r, label::SAMPLE_R),
        Side::NonProb => (&pop.pi_b, label::SAMPLE_B),
    };
    let mut rng = stream(derive(seed, lab), 0);
    let idx = poisson_indices(pi, &mut rng);
    pop.records(&idx, side, outcome, pi_r_known)
}

/// Poisson selection of clusters, then SRS without replacement within each.
pub fn two_stage_indices(pi_cluster: &[f64], n_alpha: usize, per_cluster_n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if per_cluster_n > n_alpha {
        return Err(Error::ClusterTooSmall { size: n_alpha, requested: per_cluster_n });
    }
    let mut out = Vec::new();
    for (k, &p) in pi_cluster.iter().enumerate() {
        if rng.random::<f64>() < p {
            let mut within: Vec<usize> = sample_indices(rng, n_alpha, per_cluster_n).into_vec();
            within.sort_unstable();
            out.extend(within.into_iter().map(|j| k * n_alpha + j));
        }
    }
    Ok(out)
}

pub fn two_stage_cluster_sample(
    pop: &PopulationTruth,
    side: Side,
    per_cluster_n: usize,
    outcome: &Outcome,
    pi_r_known: bool,
    seed: u64,
) -> Result<Vec<UnitRecord>> {
    let c = pop.clusters.as_ref().ok_or_else(|| Error::Precondition("population is not clustered".into()))?;
    let (pi, lab) = match side {
        Side::Reference => (&c.pi_r, label::SAMPLE_R),
        Side::NonProb => (&c.pi_b, label::SAMPLE_B),
    };
    let mut rng = stream(derive(seed, lab), 0);
    let idx = two_stage_indices(pi, c.n_alpha, per_cluster_n, &mut rng)?;
    Ok(pop.records(&idx, side, outcome, pi_r_known))
}

/// Draw both samples with the population's own design and combine them.
pub fn draw_combined(pop: &PopulationTruth, outcome_name: &str, pi_r_known: bool, seed: u64) -> Result<CombinedSample> {
    let o = pop.outcome(outcome_name)?;
    let (r, b) = match &pop.clusters {
        None => (
            poisson_sample(pop, Side::Reference, o, pi_r_known, seed),
            poisson_sample(pop, Side::NonProb, o, pi_r_known, seed),
        ),
        Some(c) => (
            two_stage_cluster_sample(pop, Side::Reference, c.per_cluster_r, o, pi_r_known, seed)?,
            two_stage_cluster_sample(pop, Side::NonProb, c.per_cluster_b, o, pi_r_known, seed)?,
        ),
    };
    Ok(build_combined(r, b, Some(pop.size() as f64))?.with_outcome(o.kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pearson;

    #[test]
    fn record_ids_map_back_to_rows() {
        assert_eq!(population_index("b17"), Some(17));
        assert_eq!(population_index("r3#copy2"), Some(3));
        assert_eq!(population_index("x"), None);
    }

    #[test]
    fn calibration_hits_target_and_reports_range() {
        let eta: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0).sin() * 3.0).collect();
        let g = calibrate_intercept(&eta, 37.0).unwrap();
        let s: f64 = eta.iter().map(|e| expit(g + e)).sum();
        assert!((s / 37.0 - 1.0).abs() < 1e-9);
        assert!(matches!(calibrate_intercept(&eta, 1000.0), Err(Error::CalibrationFailed(_))));
        assert!(matches!(calibrate_intercept(&eta, 0.0), Err(Error::CalibrationFailed(_))));
    }

    #[test]
    fn sim1_contracts() {
        let cfg = Sim1Config { n: 200_000, ..Default::default() };
        let p = gen_sim1(&cfg, 11).unwrap();
        let sb: f64 = p.pi_b.iter().sum();
        let sr: f64 = p.pi_r.iter().sum();
        assert!((sb / 1000.0 - 1.0).abs() < 1e-3);
        assert!((sr / 100.0 - 1.0).abs() < 1e-3);
        assert!(p.pi_r.iter().chain(&p.pi_b).all(|&v| v > 0.0 && v < 1.0));
        let (mn, mx) = p.pi_r.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((mx / mn - 50.0).abs() < 1e-6);
        let s: Vec<f64> = (0..cfg.n).map(|i| (0..4).map(|j| p.x[j][i]).sum()).collect();
        assert!((pearson(&p.outcomes[0].values, &s) - 0.5).abs() < 0.01);
        let a = gen_sim1(&cfg, 11).unwrap();
        assert_eq!(a.outcomes[0].values, p.outcomes[0].values);
    }

    #[test]
    fn sim2_contracts() {
        let p = gen_sim2(&Sim2Config { n: 300_000, rho: 0.0, fk: Fk::Sqr, ..Default::default() }, 5).unwrap();
        assert!(pearson(&p.x[0], &p.d[0]).abs() < 0.01);
        assert!((mean(&p.x[1]) * 2.0 - 2.0 / 3.0).abs() < 0.01);
        let signal: Vec<f64> = (0..p.size()).map(|i| 2.0 * p.x[1][i] - p.d[1][i] + 0.5 * p.d[2][i]).collect();
        assert!((pearson(&p.outcomes[0].values, &signal) - 0.5).abs() < 0.01);
        let sr: f64 = p.pi_r.iter().sum();
        assert!((sr / 100.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sim3_contracts() {
        let cfg = Sim3Config { a: 1000, n_alpha: 100, ..Default::default() };
        let p = gen_sim3(&cfg, 2).unwrap();
        let c = p.clusters.as_ref().unwrap();
        assert!((c.pi_r.iter().sum::<f64>() / 100.0 - 1.0).abs() < 1e-3);
        assert!((c.pi_b.iter().sum::<f64>() / 200.0 - 1.0).abs() < 1e-3);
        assert!((p.pi_r.iter().sum::<f64>() / 100.0 - 1.0).abs() < 1e-3);
        assert!((p.pi_b.iter().sum::<f64>() / 10_000.0 - 1.0).abs() < 1e-3);
        // x₂ mean over clusters.
        let x2: Vec<f64> = (0..cfg.a).map(|k| p.x[3][k * cfg.n_alpha]).collect();
        assert!((mean(&x2) - 0.5).abs() < 0.05);
        assert_eq!(
            gen_sim3(&Sim3Config { per_cluster_b: 101, n_alpha: 100, ..cfg }, 1).err(),
            Some(Error::ClusterTooSmall { size: 100, requested: 101 })
        );
        let small = Sim3Config::default().with_clusters(200);
        assert_eq!((small.a, small.n_r, small.n_b), (200, 100.0, 2000.0));
    }

    #[test]
    fn poisson_edge_cases() {
        let mut rng = stream(1, 0);
        assert_eq!(poisson_indices(&[1.0; 10], &mut rng), (0..10).collect::<Vec<_>>());
        let n = 1_000_000;
        let k = poisson_indices(&vec![0.5; n], &mut rng).len() as f64;
        assert!((k - 500_000.0).abs() <= 4.0 * 500.0);
        let a = poisson_indices(&vec![0.3; 1000], &mut stream(9, 0));
        let b = poisson_indices(&vec![0.3; 1000], &mut stream(9, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn two_stage_edge_cases() {
        let mut rng = stream(2, 0);
        let all = two_stage_indices(&[1.0, 0.0, 1.0], 4, 4, &mut rng).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3, 8, 9, 10, 11]);
        let one = two_stage_indices(&[1.0; 5], 4, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 5);
        assert!(one.iter().enumerate().all(|(k, &i)| i / 4 == k));
        assert_eq!(two_stage_indices(&[1.0], 4, 5, &mut rng), Err(Error::ClusterTooSmall { size: 4, requested: 5 }));
    }

    #[test]
    fn combined_draw_tags_sides() {
        let p = gen_sim1(&Sim1Config { n: 20_000, n_b: 200.0, n_r: 50.0, ..Default::default() }, 3).unwrap();
        let s = draw_combined(&p, "y", true, 4).unwrap();
        assert!(s.b_records().iter().all(|r| r.id.starts_with('b') && r.pi_r.is_some()));
        assert!(s.r_records().iter().all(|r| r.id.starts_with('r')));
        let s2 = draw_combined(&p, "y", false, 4).unwrap();
        assert!(s2.b_records().iter().all(|r| r.pi_r.is_none()));
        assert_eq!(s.n_b(), s2.n_b());
    }
}
