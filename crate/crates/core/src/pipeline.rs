//! One replication of a simulation scenario: generate, sample, then run
//! every configured estimator/variance cell on the drawn samples.

use std::cell::RefCell;
use std::collections::HashMap;
use std::hash::Hash;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aipw::{aipw_bayes, aipw_joint, aipw_point, pm_point, BayesRoute, DrawSet, Normalization};
use crate::bart::{bart_fit_continuous, bart_fit_logit_target, bart_fit_probit, bart_predict, BartConfig, BartScale};
use crate::data::{CombinedSample, OutcomeKind, UnitRecord};
use crate::error::{Error, Result};
use crate::glm::{
    fit_beta_regression, fit_linear, fit_logistic, posterior_sample, predict, predict_draws, Family, GlmFit, McmcConfig, Scale,
};
use crate::linalg::{mean, sample_variance};
use crate::rng::{derive, label};
use crate::sim::{
    draw_combined, gen_sim1, gen_sim2, gen_sim3, population_index, FeatureSet, Fk, PopulationTruth, Sim1Config, Sim2Config,
    Sim3Config, Spec, SpecMasks,
};
use crate::variance::{
    chen_dr_variance, pm_variance, rao_wu_bootstrap_multi, rubin_combine, sandwich_papw, within_variance_terms,
    BootstrapConfig, DrawComponents,
};
use crate::weights::{hajek_mean, papp_odds, papw_odds, pseudo_weighted_mean, solve_pmle_matrices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Glm,
    BayesGlm,
    Bart,
}

impl Engine {
    pub fn tag(self) -> &'static str {
        match self {
            Engine::Glm => "GLM",
            Engine::BayesGlm => "BGLM",
            Engine::Bart => "BART",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// S_R mean with the simulated outcome; needs the population.
    UnweightedR,
    WeightedR,
    UnweightedB,
    /// S_B Hájek mean with the true π^B; needs the population.
    WeightedB,
    Papw,
    Papp,
    Ipsw,
    Pm,
    AipwPapw,
    AipwPapp,
    AipwIpsw,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::UnweightedR => "Unweighted-R",
            Method::WeightedR => "Weighted-R",
            Method::UnweightedB => "Unweighted-B",
            Method::WeightedB => "Weighted-B",
            Method::Papw => "PAPW",
            Method::Papp => "PAPP",
            Method::Ipsw => "IPSW",
            Method::Pm => "PM",
            Method::AipwPapw => "AIPW-PAPW",
            Method::AipwPapp => "AIPW-PAPP",
            Method::AipwIpsw => "AIPW-IPSW",
        }
    }

    pub fn is_benchmark(self) -> bool {
        matches!(self, Method::UnweightedR | Method::WeightedR | Method::UnweightedB | Method::WeightedB)
    }

    fn route(self) -> Option<Route> {
        match self {
            Method::Papw | Method::AipwPapw => Some(Route::Papw),
            Method::Papp | Method::AipwPapp => Some(Route::Papp),
            Method::Ipsw | Method::AipwIpsw => Some(Route::Ipsw),
            _ => None,
        }
    }

    /// Whether the method builds pseudo-inclusion probabilities.
    pub fn uses_qr(self) -> bool {
        self.route().is_some()
    }

    /// Whether the method fits an outcome model.
    pub fn uses_pm(self) -> bool {
        matches!(self, Method::Pm | Method::AipwPapw | Method::AipwPapp | Method::AipwIpsw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Route {
    Papw,
    Papp,
    Ipsw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Closed form: sandwich, DR asymptotic, PM linearization or simple design formulas.
    Analytic,
    Bootstrap,
    Rubin,
    None,
}

/// One row of an output table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub engine: Engine,
    pub method: Method,
    pub qr: Option<Spec>,
    pub pm: Option<Spec>,
    pub variance: VarianceKind,
}

impl Cell {
    pub fn new(engine: Engine, method: Method, qr: Option<Spec>, pm: Option<Spec>, variance: VarianceKind) -> Self {
        Cell { engine, method, qr, pm, variance }
    }

    pub fn benchmark(method: Method) -> Self {
        Cell::new(Engine::Glm, method, None, None, VarianceKind::Analytic)
    }

    pub fn label(&self) -> String {
        if self.method.is_benchmark() {
            self.method.tag().to_string()
        } else {
            format!("{}-{}", self.engine.tag(), self.method.tag())
        }
    }

    /// Model-specification letters, QR first; "-" for benchmarks.
    pub fn spec_label(&self) -> String {
        let s: String = [self.qr, self.pm].iter().flatten().map(|s| s.letter()).collect();
        if s.is_empty() {
            "-".into()
        } else {
            s
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(format!("{} {}: {m}", self.label(), self.spec_label())));
        let m = self.method;
        if m.is_benchmark() {
            if !matches!(self.variance, VarianceKind::Analytic | VarianceKind::None) {
                return bad("benchmarks support analytic or no variance".into());
            }
            return Ok(());
        }
        if m.route().is_some() != self.qr.is_some() {
            return bad("a QR specification is required exactly for pseudo-weighting methods".into());
        }
        if m.uses_pm() != self.pm.is_some() {
            return bad("a PM specification is required exactly for prediction methods".into());
        }
        if self.engine == Engine::Bart && m.route() == Some(Route::Ipsw) {
            return bad("IPSW has no tree-ensemble form".into());
        }
        match (self.engine, self.variance) {
            (_, VarianceKind::None) => Ok(()),
            (Engine::Glm, VarianceKind::Bootstrap) => Ok(()),
            (Engine::Glm, VarianceKind::Analytic) => match m {
                Method::Papw | Method::Pm | Method::AipwPapw | Method::AipwIpsw => Ok(()),
                _ => bad("no closed-form variance; use bootstrap".into()),
            },
            (Engine::Glm, VarianceKind::Rubin) => bad("Rubin's rules need a Bayesian engine".into()),
            (_, VarianceKind::Rubin) => Ok(()),
            _ => bad("Bayesian engines use Rubin's rules".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Sim1(Sim1Config),
    Sim2(Sim2Config),
    Sim3(Sim3Config),
}

impl Scenario {
    pub fn generate(&self, seed: u64) -> Result<PopulationTruth> {
        match self {
            Scenario::Sim1(c) => gen_sim1(c, seed),
            Scenario::Sim2(c) => gen_sim2(c, seed),
            Scenario::Sim3(c) => gen_sim3(c, seed),
        }
    }

    pub fn outcome_names(&self) -> Vec<String> {
        match self {
            Scenario::Sim3(_) => vec!["yc".into(), "yb".into()],
            _ => vec!["y".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Outcomes to analyse; empty means all.
    pub outcomes: Vec<String>,
    pub cells: Vec<Cell>,
    pub mcmc: McmcConfig,
    pub bart: BartConfig,
    /// Trees in the probit ensemble for propensities and binary outcomes.
    pub bart_probit_trees: usize,
    pub bootstrap_replicates: usize,
    /// Solve the frequentist AIPW-PAPW equations jointly when the QR and PM designs have equal width.
    pub joint_aipw: bool,
    pub normalization: Normalization,
    /// Reuse one population for all replications instead of regenerating it.
    pub fixed_population: bool,
}

pub const PRESETS: [&str; 4] = ["sim1", "sim1-bayes", "sim2", "sim3"];

const SPECS: [Spec; 2] = [Spec::True, Spec::False];

fn spec_pairs() -> impl Iterator<Item = (Spec, Spec)> {
    SPECS.into_iter().flat_map(|q| SPECS.into_iter().map(move |p| (q, p)))
}

fn grid(engine: Engine, qr_methods: &[Method], dr_methods: &[Method], v_qr: &[VarianceKind], v_pm: VarianceKind, v_dr: VarianceKind) -> Vec<Cell> {
    let mut cells = Vec::new();
    for s in SPECS {
        for (k, &m) in qr_methods.iter().enumerate() {
            cells.push(Cell::new(engine, m, Some(s), None, v_qr[k]));
        }
        cells.push(Cell::new(engine, Method::Pm, None, Some(s), v_pm));
    }
    for (q, p) in spec_pairs() {
        for &m in dr_methods {
            cells.push(Cell::new(engine, m, Some(q), Some(p), v_dr));
        }
    }
    cells
}

fn bart_rows(methods: &[Method]) -> Vec<Cell> {
    methods
        .iter()
        .map(|&m| {
            let qr = m.route().map(|_| Spec::False);
            let pm = m.uses_pm().then_some(Spec::False);
            Cell::new(Engine::Bart, m, qr, pm, VarianceKind::Rubin)
        })
        .collect()
}

fn benchmarks(with_r: bool) -> Vec<Cell> {
    let mut v = Vec::new();
    if with_r {
        v.extend([Cell::benchmark(Method::UnweightedR), Cell::benchmark(Method::WeightedR)]);
    }
    v.extend([Cell::benchmark(Method::UnweightedB), Cell::benchmark(Method::WeightedB)]);
    v
}

impl ScenarioConfig {
    fn base(scenario: Scenario, cells: Vec<Cell>) -> Self {
        ScenarioConfig {
            scenario,
            outcomes: Vec::new(),
            cells,
            mcmc: McmcConfig::default(),
            bart: BartConfig::default(),
            bart_probit_trees: 50,
            bootstrap_replicates: 200,
            joint_aipw: false,
            normalization: Normalization::Hajek,
            fixed_population: false,
        }
    }

    /// Built-in scenario grids; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        use Method::*;
        use VarianceKind::{Analytic, Bootstrap, Rubin};
        Ok(match name {
            "sim1" => {
                let mut cells = benchmarks(true);
                cells.extend(grid(Engine::Glm, &[Papw, Ipsw], &[AipwPapw, AipwIpsw], &[Analytic, Bootstrap], Analytic, Analytic));
                ScenarioConfig { joint_aipw: true, ..Self::base(Scenario::Sim1(Sim1Config::default()), cells) }
            }
            "sim1-bayes" => {
                let mut cells = benchmarks(true);
                cells.extend(grid(Engine::BayesGlm, &[Papw, Papp], &[AipwPapw, AipwPapp], &[Rubin, Rubin], Rubin, Rubin));
                Self::base(Scenario::Sim1(Sim1Config::default()), cells)
            }
            "sim2" => {
                let mut cells = benchmarks(true);
                cells.extend(grid(Engine::BayesGlm, &[Papw, Papp], &[AipwPapw, AipwPapp], &[Rubin, Rubin], Rubin, Rubin));
                cells.extend(bart_rows(&[Papw, Papp, Pm, AipwPapw, AipwPapp]));
                Self::base(Scenario::Sim2(Sim2Config { n_b: 1000.0, ..Default::default() }), cells)
            }
            "sim3" => {
                let mut cells = benchmarks(true);
                cells.extend(grid(
                    Engine::Glm,
                    &[Papw, Papp, Ipsw],
                    &[AipwPapw, AipwPapp, AipwIpsw],
                    &[Bootstrap, Bootstrap, Bootstrap],
                    Bootstrap,
                    Bootstrap,
                ));
                cells.extend(bart_rows(&[Papw, Papp, Pm, AipwPapw, AipwPapp]));
                Self::base(Scenario::Sim3(Sim3Config::default()), cells)
            }
            other => {
                return Err(Error::ConfigInvalid(format!("unknown scenario '{other}'; valid: {}", PRESETS.join(", "))));
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::ConfigInvalid("no cells configured".into()));
        }
        let names = self.scenario.outcome_names();
        if let Some(o) = self.outcomes.iter().find(|o| !names.contains(o)) {
            return Err(Error::ConfigInvalid(format!("unknown outcome '{o}'; valid: {}", names.join(", "))));
        }
        for c in &self.cells {
            c.validate()?;
        }
        if self.cells.iter().any(|c| c.variance == VarianceKind::Bootstrap) && self.bootstrap_replicates < 2 {
            return Err(Error::ConfigInvalid("bootstrap needs at least 2 replicates".into()));
        }
        if self.bart_probit_trees == 0 {
            return Err(Error::ConfigInvalid("bart_probit_trees must be at least 1".into()));
        }
        Ok(())
    }

    pub fn outcome_list(&self) -> Vec<String> {
        if self.outcomes.is_empty() {
            self.scenario.outcome_names()
        } else {
            self.outcomes.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub point: f64,
    pub variance: Option<f64>,
}

/// Results of one replication: `estimates[outcome][cell]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub truths: Vec<f64>,
    pub estimates: Vec<Vec<Result<Estimate>>>,
}

/// Generate (or reuse) the population, draw samples, evaluate all cells.
pub fn run_replication(cfg: &ScenarioConfig, rep_seed: u64, fixed: Option<&PopulationTruth>) -> Result<ReplicationResult> {
    let owned;
    let pop = match fixed {
        Some(p) => p,
        None => {
            owned = cfg.scenario.generate(derive(rep_seed, label::POPULATION))?;
            &owned
        }
    };
    let outcomes = cfg.outcome_list();
    let mut truths = Vec::with_capacity(outcomes.len());
    let mut estimates = Vec::with_capacity(outcomes.len());
    for name in &outcomes {
        truths.push(pop.outcome(name)?.mean);
        let row = match draw_combined(pop, name, true, rep_seed) {
            Ok(sample) => evaluate_cells(cfg, &sample, &pop.masks, Some((pop, name)), rep_seed),
            Err(e) => vec![Err(e); cfg.cells.len()],
        };
        estimates.push(row);
    }
    Ok(ReplicationResult { truths, estimates })
}

/// Evaluate every cell on one combined sample.
///
/// `population` supplies simulated truth for the benchmark rows.
pub fn evaluate_cells(
    cfg: &ScenarioConfig,
    sample: &CombinedSample,
    masks: &SpecMasks,
    population: Option<(&PopulationTruth, &str)>,
    seed: u64,
) -> Vec<Result<Estimate>> {
    let ctx = Ctx::new(cfg, sample, masks, seed);
    let mut out: Vec<Result<Estimate>> = cfg
        .cells
        .iter()
        .map(|c| {
            if c.method.is_benchmark() {
                benchmark(sample, c, population)
            } else if c.engine == Engine::Glm {
                ctx.glm_estimate(c)
            } else {
                ctx.bayes_estimate(c)
            }
        })
        .collect();
    let boot: Vec<usize> = (0..cfg.cells.len())
        .filter(|&k| cfg.cells[k].variance == VarianceKind::Bootstrap && out[k].is_ok())
        .collect();
    if boot.is_empty() {
        return out;
    }
    let bcfg = BootstrapConfig {
        replicates: cfg.bootstrap_replicates,
        seed,
        cluster_aware: sample.records().iter().any(|r| r.cluster_id.is_some()),
        ..Default::default()
    };
    let cells: Vec<Cell> = boot.iter().map(|&k| cfg.cells[k]).collect();
    let reports = rao_wu_bootstrap_multi(sample, &bcfg, cells.len(), |s| {
        let c = Ctx::new(cfg, s, masks, seed);
        cells.iter().map(|cell| c.glm_point(cell).map(|p| p.point)).collect()
    });
    match reports {
        Ok(reports) => {
            for (&k, rep) in boot.iter().zip(reports) {
                out[k] = match rep {
                    Ok(v) => out[k].clone().map(|e| Estimate { variance: Some(v.variance), ..e }),
                    Err(e) => Err(e),
                };
            }
        }
        Err(e) => {
            for &k in &boot {
                out[k] = Err(e.clone());
            }
        }
    }
    out
}

fn benchmark(sample: &CombinedSample, cell: &Cell, population: Option<(&PopulationTruth, &str)>) -> Result<Estimate> {
    let (pop, name) = population.ok_or_else(|| Error::Precondition("benchmarks need the simulated population".into()))?;
    let values = &pop.outcome(name)?.values;
    let lookup = |recs: &[UnitRecord], pi: &dyn Fn(&UnitRecord, usize) -> f64| -> Result<(Vec<f64>, Vec<f64>)> {
        recs.iter()
            .map(|r| {
                let i = population_index(&r.id).ok_or_else(|| Error::InvalidValue {
                    field: "id".into(),
                    reason: format!("'{}' is not a generated record id", r.id),
                })?;
                Ok((values[i], pi(r, i)))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    };
    let (y, pi) = match cell.method {
        Method::UnweightedR | Method::WeightedR => lookup(sample.r_records(), &|r, _| r.pi_r.unwrap_or(f64::NAN))?,
        _ => lookup(sample.b_records(), &|_, i| pop.pi_b[i])?,
    };
    let weighted = matches!(cell.method, Method::WeightedR | Method::WeightedB);
    let (point, variance) = if weighted {
        let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
        let m = hajek_mean(&y, &w)?;
        let n_hat: f64 = w.iter().sum();
        let v = y.iter().zip(&pi).map(|(y, p)| (1.0 - p) / (p * p) * (y - m).powi(2)).sum::<f64>() / (n_hat * n_hat);
        (m, v)
    } else {
        if y.is_empty() {
            return Err(Error::EmptySample("benchmark"));
        }
        (mean(&y), sample_variance(&y) / y.len() as f64)
    };
    Ok(Estimate { point, variance: (cell.variance == VarianceKind::Analytic).then_some(variance) })
}

/// Frequentist point plus the pieces the closed-form variances need.
struct GlmPoint {
    point: f64,
    pib: Vec<f64>,
    /// Outcome predictions and conditional variances on every row.
    m: Option<(Vec<f64>, Vec<f64>)>,
}

struct PmFit {
    fit: GlmFit,
    m: Vec<f64>,
    sigma2: Vec<f64>,
}

type Cache<K, T> = RefCell<HashMap<K, Result<Rc<T>>>>;

fn memo<K: Eq + Hash + Copy, T>(cache: &Cache<K, T>, key: K, f: impl FnOnce() -> Result<T>) -> Result<Rc<T>> {
    if let Some(v) = cache.borrow().get(&key) {
        return v.clone();
    }
    let v = f().map(Rc::new);
    cache.borrow_mut().insert(key, v.clone());
    v
}

/// Fitted nuisance models for one sample, shared across cells.
struct Ctx<'a> {
    cfg: &'a ScenarioConfig,
    sample: &'a CombinedSample,
    masks: &'a SpecMasks,
    seed: u64,
    binary: bool,
    prop: Cache<(Spec, bool), Vec<f64>>,
    pmle: Cache<Spec, Vec<f64>>,
    pir: Cache<Spec, Vec<f64>>,
    pm: Cache<Spec, PmFit>,
    b_prop: Cache<(Engine, Spec, bool), DMatrix<f64>>,
    b_pir: Cache<(Engine, Spec), DMatrix<f64>>,
    b_pm: Cache<(Engine, Spec), DMatrix<f64>>,
}

/// Design matrix over the given records using a feature mask.
pub fn masked_design(recs: &[UnitRecord], fs: &FeatureSet, intercept: bool) -> Result<DMatrix<f64>> {
    let k = fs.width() + intercept as usize;
    let mut out = DMatrix::zeros(recs.len(), k);
    for (i, r) in recs.iter().enumerate() {
        let mut j = 0;
        if intercept {
            out[(i, 0)] = 1.0;
            j = 1;
        }
        for &c in &fs.x {
            out[(i, j)] = *r.x.get(c).ok_or_else(|| Error::DimensionMismatch { expected: c + 1, got: r.x.len() })?;
            j += 1;
        }
        for &c in &fs.d {
            let d = r.d.as_ref().ok_or_else(|| Error::MissingField { field: "d".into(), row: Some(r.id.clone()) })?;
            out[(i, j)] = *d.get(c).ok_or_else(|| Error::DimensionMismatch { expected: c + 1, got: d.len() })?;
            j += 1;
        }
    }
    Ok(out)
}

fn key_code(engine: Engine, spec: Spec, x_only: bool) -> u64 {
    (engine as u64) * 100 + (spec as u64) * 10 + x_only as u64
}

fn columns(m: &DMatrix<f64>, from: usize, to: usize) -> DMatrix<f64> {
    m.columns(from, to - from).into_owned()
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a ScenarioConfig, sample: &'a CombinedSample, masks: &'a SpecMasks, seed: u64) -> Self {
        Ctx {
            cfg,
            sample,
            masks,
            seed,
            binary: sample.outcome() == OutcomeKind::Binary,
            prop: Default::default(),
            pmle: Default::default(),
            pir: Default::default(),
            pm: Default::default(),
            b_prop: Default::default(),
            b_pir: Default::default(),
            b_pm: Default::default(),
        }
    }

    fn qr_mask(&self, spec: Spec, x_only: bool) -> FeatureSet {
        let fs = self.masks.qr(spec);
        if x_only {
            fs.x_only()
        } else {
            fs.clone()
        }
    }

    fn all(&self, fs: &FeatureSet, intercept: bool) -> Result<DMatrix<f64>> {
        masked_design(self.sample.records(), fs, intercept)
    }

    fn b(&self, fs: &FeatureSet, intercept: bool) -> Result<DMatrix<f64>> {
        masked_design(self.sample.b_records(), fs, intercept)
    }

    fn r(&self, fs: &FeatureSet, intercept: bool) -> Result<DMatrix<f64>> {
        masked_design(self.sample.r_records(), fs, intercept)
    }

    /// P(Z=1|x) on every row from a logistic fit on the combined sample.
    fn glm_prop(&self, spec: Spec, x_only: bool) -> Result<Rc<Vec<f64>>> {
        memo(&self.prop, (spec, x_only), || {
            let x = self.all(&self.qr_mask(spec, x_only), true)?;
            let fit = fit_logistic(&x, &self.sample.z(), None)?;
            predict(&fit, &x, Scale::Mean)
        })
    }

    fn glm_pmle(&self, spec: Spec) -> Result<Rc<Vec<f64>>> {
        memo(&self.pmle, spec, || {
            let fs = self.masks.qr(spec);
            let xb = self.b(fs, true)?;
            let fit = solve_pmle_matrices(&xb, &self.r(fs, true)?, &self.sample.pi_r_r())?;
            predict(&fit, &xb, Scale::Mean)
        })
    }

    /// π^R predicted on S_B from a beta regression fitted on S_R.
    fn glm_pir(&self, spec: Spec) -> Result<Rc<Vec<f64>>> {
        memo(&self.pir, spec, || {
            let fs = self.qr_mask(spec, true);
            let fit = fit_beta_regression(&self.r(&fs, true)?, &self.sample.pi_r_r())?;
            predict(&fit, &self.b(&fs, true)?, Scale::Mean)
        })
    }

    fn glm_pm(&self, spec: Spec) -> Result<Rc<PmFit>> {
        memo(&self.pm, spec, || {
            let fs = self.masks.pm(spec);
            let xb = self.b(fs, true)?;
            let y = self.sample.y_b();
            let fit = if self.binary { fit_logistic(&xb, &y, None)? } else { fit_linear(&xb, &y, None)? };
            let m = predict(&fit, &self.all(fs, true)?, Scale::Mean)?;
            let sigma2 = if self.binary {
                m.iter().map(|p| p * (1.0 - p)).collect()
            } else {
                vec![fit.dispersion.unwrap_or(0.0).powi(2); m.len()]
            };
            Ok(PmFit { fit, m, sigma2 })
        })
    }

    fn glm_pib(&self, route: Route, spec: Spec) -> Result<Vec<f64>> {
        let n_b = self.sample.n_b();
        match route {
            Route::Papw => {
                let p = self.glm_prop(spec, false)?;
                Ok(papw_odds(self.sample, &DMatrix::from_row_slice(1, n_b, &p[..n_b]))?.row(0).iter().copied().collect())
            }
            Route::Papp => {
                let p = self.glm_prop(spec, true)?;
                let pir = self.glm_pir(spec)?;
                let odds = papp_odds(&DMatrix::from_row_slice(1, n_b, &pir), &DMatrix::from_row_slice(1, n_b, &p[..n_b]))?;
                Ok(odds.row(0).iter().copied().collect())
            }
            Route::Ipsw => Ok(self.glm_pmle(spec)?.to_vec()),
        }
    }

    fn glm_point(&self, cell: &Cell) -> Result<GlmPoint> {
        let n_b = self.sample.n_b();
        let route = cell.method.route();
        match (route, cell.qr, cell.pm) {
            (Some(route), Some(q), None) => {
                let pib = self.glm_pib(route, q)?;
                Ok(GlmPoint { point: pseudo_weighted_mean(self.sample, &pib)?, pib, m: None })
            }
            (None, None, Some(p)) => {
                let f = self.glm_pm(p)?;
                let point = pm_point(self.sample, &f.m[n_b..])?;
                Ok(GlmPoint { point, pib: Vec::new(), m: Some((f.m.clone(), f.sigma2.clone())) })
            }
            (Some(route), Some(q), Some(p)) => {
                let norm = self.cfg.normalization;
                if route == Route::Papw && self.cfg.joint_aipw && self.masks.qr(q).width() == self.masks.pm(p).width() {
                    let sol = aipw_joint(self.sample, &self.all(self.masks.qr(q), true)?, &self.all(self.masks.pm(p), true)?, norm)?;
                    let pib = sol.pib(self.sample)?;
                    let sigma2 = if self.binary {
                        sol.m.iter().map(|v| v * (1.0 - v)).collect()
                    } else {
                        let y = self.sample.y_b();
                        let dof = (n_b as f64 - sol.theta.len() as f64).max(1.0);
                        let s2 = (0..n_b).map(|i| (y[i] - sol.m[i]).powi(2)).sum::<f64>() / dof;
                        vec![s2; sol.m.len()]
                    };
                    return Ok(GlmPoint { point: sol.point, pib, m: Some((sol.m, sigma2)) });
                }
                let pib = self.glm_pib(route, q)?;
                let f = self.glm_pm(p)?;
                let point = aipw_point(self.sample, &pib, &f.m[..n_b], &f.m[n_b..], norm)?;
                Ok(GlmPoint { point, pib, m: Some((f.m.clone(), f.sigma2.clone())) })
            }
            _ => Err(Error::ConfigInvalid(format!("{} has an invalid specification", cell.label()))),
        }
    }

    fn glm_estimate(&self, cell: &Cell) -> Result<Estimate> {
        let g = self.glm_point(cell)?;
        let variance = match cell.variance {
            VarianceKind::Analytic => Some(self.glm_analytic(cell, &g)?),
            _ => None,
        };
        Ok(Estimate { point: g.point, variance })
    }

    fn glm_analytic(&self, cell: &Cell, g: &GlmPoint) -> Result<f64> {
        let n_b = self.sample.n_b();
        match cell.method {
            Method::Papw => {
                let q = cell.qr.expect("validated");
                let p = self.glm_prop(q, false)?;
                let x = self.all(self.masks.qr(q), true)?;
                Ok(sandwich_papw(self.sample, &g.pib, &p, &x, g.point)?.variance)
            }
            Method::Pm => {
                let f = self.glm_pm(cell.pm.expect("validated"))?;
                let xr = self.r(self.masks.pm(cell.pm.expect("validated")), true)?;
                let vcov = f.fit.vcov.clone().ok_or(Error::SingularMatrix)?;
                let pi_r = self.sample.pi_r_r();
                let n_hat = self.sample.n_hat_r();
                let mut grad = DVector::zeros(xr.ncols());
                for (i, p) in pi_r.iter().enumerate() {
                    let mi = f.m[n_b + i];
                    let dm = if self.binary { mi * (1.0 - mi) } else { 1.0 };
                    grad += xr.row(i).transpose() * (dm / (p * n_hat));
                }
                Ok(pm_variance(self.sample, &f.m[n_b..], &grad, &vcov)?.variance)
            }
            Method::AipwPapw | Method::AipwIpsw => {
                let (m, s2) = g.m.as_ref().expect("AIPW carries predictions");
                Ok(chen_dr_variance(self.sample, &g.pib, m, s2)?.variance)
            }
            _ => Err(Error::ConfigInvalid(format!("{}: no closed-form variance", cell.label()))),
        }
    }

    fn bart_cfg(&self, probit: bool, stream: u64) -> BartConfig {
        let mut c = self.cfg.bart;
        if probit {
            c.m = self.cfg.bart_probit_trees;
        }
        c.seed = stream;
        c
    }

    fn mcmc_cfg(&self, stream: u64) -> McmcConfig {
        McmcConfig { seed: stream, ..self.cfg.mcmc }
    }

    fn feature_spec(engine: Engine, spec: Spec) -> Spec {
        if engine == Engine::Bart {
            Spec::False
        } else {
            spec
        }
    }

    fn bayes_mask(&self, engine: Engine, fs: &FeatureSet, x_only: bool) -> FeatureSet {
        let f = if engine == Engine::Bart { &self.masks.main } else { fs };
        if x_only {
            f.x_only()
        } else {
            f.clone()
        }
    }

    /// M × n_B propensity draws on S_B.
    fn bayes_prop(&self, engine: Engine, spec: Spec, x_only: bool) -> Result<Rc<DMatrix<f64>>> {
        let spec = Self::feature_spec(engine, spec);
        memo(&self.b_prop, (engine, spec, x_only), || {
            let fs = self.bayes_mask(engine, self.masks.qr(spec), x_only);
            let stream = derive(derive(self.seed, label::MCMC_Z), key_code(engine, spec, x_only));
            let n_b = self.sample.n_b();
            let z = self.sample.z();
            let draws = match engine {
                Engine::Bart => {
                    let x = self.all(&fs, false)?;
                    bart_predict(&bart_fit_probit(&x, &z, &self.bart_cfg(true, stream))?, &x, BartScale::Response)?
                }
                _ => {
                    let x = self.all(&fs, true)?;
                    predict_draws(&posterior_sample(Family::Logistic, &x, &z, &self.mcmc_cfg(stream))?, &x, Scale::Mean)?
                }
            };
            Ok(columns(&draws, 0, n_b))
        })
    }

    /// M × n_B draws of π^R predicted on S_B.
    fn bayes_pir(&self, engine: Engine, spec: Spec) -> Result<Rc<DMatrix<f64>>> {
        let spec = Self::feature_spec(engine, spec);
        memo(&self.b_pir, (engine, spec), || {
            let fs = self.bayes_mask(engine, self.masks.qr(spec), true);
            let stream = derive(derive(self.seed, label::MCMC_PIR), key_code(engine, spec, true));
            let pi_r = self.sample.pi_r_r();
            match engine {
                Engine::Bart => {
                    let fit = bart_fit_logit_target(&self.r(&fs, false)?, &pi_r, &self.bart_cfg(false, stream))?;
                    bart_predict(&fit, &self.b(&fs, false)?, BartScale::Response)
                }
                _ => {
                    let post = posterior_sample(Family::Beta, &self.r(&fs, true)?, &pi_r, &self.mcmc_cfg(stream))?;
                    predict_draws(&post, &self.b(&fs, true)?, Scale::Mean)
                }
            }
        })
    }

    /// M × n outcome-mean draws on every row.
    fn bayes_pm(&self, engine: Engine, spec: Spec) -> Result<Rc<DMatrix<f64>>> {
        let spec = Self::feature_spec(engine, spec);
        memo(&self.b_pm, (engine, spec), || {
            let fs = self.bayes_mask(engine, self.masks.pm(spec), false);
            let stream = derive(derive(self.seed, label::MCMC_Y), key_code(engine, spec, false));
            let y = self.sample.y_b();
            match engine {
                Engine::Bart => {
                    let xb = self.b(&fs, false)?;
                    let x = self.all(&fs, false)?;
                    let fit = if self.binary {
                        bart_fit_probit(&xb, &y, &self.bart_cfg(true, stream))?
                    } else {
                        bart_fit_continuous(&xb, &y, &self.bart_cfg(false, stream))?
                    };
                    bart_predict(&fit, &x, BartScale::Response)
                }
                _ => {
                    let family = if self.binary { Family::Logistic } else { Family::Linear };
                    let post = posterior_sample(family, &self.b(&fs, true)?, &y, &self.mcmc_cfg(stream))?;
                    predict_draws(&post, &self.all(&fs, true)?, Scale::Mean)
                }
            }
        })
    }

    fn bayes_drawset(&self, engine: Engine, route: Route, spec: Spec, y_imputed: DMatrix<f64>) -> Result<(DrawSet, BayesRoute)> {
        Ok(match route {
            Route::Papw => (
                DrawSet { y_imputed, propensity: (*self.bayes_prop(engine, spec, false)?).clone(), pir_pred: None },
                BayesRoute::PapwKnownPir,
            ),
            Route::Papp => (
                DrawSet {
                    y_imputed,
                    propensity: (*self.bayes_prop(engine, spec, true)?).clone(),
                    pir_pred: Some((*self.bayes_pir(engine, spec)?).clone()),
                },
                BayesRoute::PappUnknownPir,
            ),
            Route::Ipsw => return Err(Error::ConfigInvalid("IPSW has no Bayesian form".into())),
        })
    }

    fn bayes_estimate(&self, cell: &Cell) -> Result<Estimate> {
        let (n_b, n) = (self.sample.n_b(), self.sample.n());
        let clustered = self.sample.records().iter().any(|r| r.cluster_id.is_some());
        let engine = cell.engine;
        let row = |m: &DMatrix<f64>, k: usize| -> Vec<f64> { m.row(k).iter().copied().collect() };
        let (per_draw, within): (Vec<f64>, Vec<f64>) = match (cell.method.route(), cell.qr, cell.pm) {
            (Some(route), Some(q), None) => {
                let draws = self.bayes_prop(engine, q, route == Route::Papp)?.nrows();
                let (ds, br) = self.bayes_drawset(engine, route, q, DMatrix::zeros(draws, n))?;
                let pib = ds.pib(self.sample, br)?;
                let zeros = vec![0.0; self.sample.n_r()];
                (0..pib.nrows())
                    .map(|k| {
                        let pb = row(&pib, k);
                        let w = within_variance_terms(self.sample, DrawComponents { pib: &pb, yhat_r: &zeros }, clustered)?.0;
                        Ok((pseudo_weighted_mean(self.sample, &pb)?, w))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip()
            }
            (None, None, Some(p)) => {
                let y = self.bayes_pm(engine, p)?;
                let ones = vec![1.0; n_b];
                (0..y.nrows())
                    .map(|k| {
                        let yr = &row(&y, k)[n_b..];
                        let w = within_variance_terms(self.sample, DrawComponents { pib: &ones, yhat_r: yr }, clustered)?.1;
                        Ok((pm_point(self.sample, yr)?, w))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip()
            }
            (Some(route), Some(q), Some(p)) => {
                let y = (*self.bayes_pm(engine, p)?).clone();
                let (ds, br) = self.bayes_drawset(engine, route, q, y)?;
                let res = aipw_bayes(self.sample, &ds, br)?;
                let pib = ds.pib(self.sample, br)?;
                let within = (0..ds.n_draws())
                    .map(|k| {
                        let pb = row(&pib, k);
                        let yr = &row(&ds.y_imputed, k)[n_b..];
                        within_variance_terms(self.sample, DrawComponents { pib: &pb, yhat_r: yr }, clustered).map(|(a, b)| a + b)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (res.per_draw, within)
            }
            _ => return Err(Error::ConfigInvalid(format!("{} has an invalid specification", cell.label()))),
        };
        let point = mean(&per_draw);
        let variance = match cell.variance {
            VarianceKind::Rubin if per_draw.len() >= 2 => Some(rubin_combine(&per_draw, &within)?.variance),
            VarianceKind::Rubin => Some(within[0]),
            _ => None,
        };
        Ok(Estimate { point, variance })
    }
}

/// π̂ᴮ on S_B behind a pseudo-weighting or AIPW cell; posterior means for Bayesian engines.
pub fn pseudo_inclusion(cfg: &ScenarioConfig, sample: &CombinedSample, masks: &SpecMasks, cell: &Cell, seed: u64) -> Result<Vec<f64>> {
    cell.validate()?;
    let ctx = Ctx::new(cfg, sample, masks, seed);
    let (route, q) = match (cell.method.route(), cell.qr) {
        (Some(r), Some(q)) => (r, q),
        _ => return Err(Error::ConfigInvalid(format!("{} has no pseudo-weights", cell.label()))),
    };
    if cell.engine == Engine::Glm {
        return Ok(ctx.glm_point(cell)?.pib);
    }
    let draws = ctx.bayes_prop(cell.engine, q, route == Route::Papp)?.nrows();
    let (ds, br) = ctx.bayes_drawset(cell.engine, route, q, DMatrix::zeros(draws, sample.n()))?;
    let pib = ds.pib(sample, br)?;
    Ok((0..pib.ncols()).map(|i| pib.column(i).mean()).collect())
}

/// Sim II scenario with a chosen outcome function, keeping the preset cells.
pub fn sim2_with(fk: Fk, mut cfg: ScenarioConfig) -> ScenarioConfig {
    if let Scenario::Sim2(c) = &mut cfg.scenario {
        c.fk = fk;
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sim1(cells: Vec<Cell>) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset("sim1").unwrap();
        cfg.scenario = Scenario::Sim1(Sim1Config::default());
        cfg.cells = cells;
        cfg.bootstrap_replicates = 20;
        cfg
    }

    #[test]
    fn presets_validate_and_unknown_names_list_valid_ones() {
        for name in PRESETS {
            ScenarioConfig::preset(name).unwrap().validate().unwrap();
        }
        let err = ScenarioConfig::preset("sim9").unwrap_err();
        assert!(err.to_string().contains("sim1-bayes"));
    }

    #[test]
    fn cell_rules() {
        let c = Cell::new(Engine::Bart, Method::Ipsw, Some(Spec::True), None, VarianceKind::Rubin);
        assert!(c.validate().is_err());
        let c = Cell::new(Engine::Glm, Method::Papp, Some(Spec::True), None, VarianceKind::Analytic);
        assert!(c.validate().is_err());
        let c = Cell::new(Engine::Glm, Method::Pm, Some(Spec::True), None, VarianceKind::Analytic);
        assert!(c.validate().is_err());
        let c = Cell::new(Engine::BayesGlm, Method::AipwPapp, Some(Spec::True), Some(Spec::False), VarianceKind::Rubin);
        c.validate().unwrap();
        assert_eq!(c.label(), "BGLM-AIPW-PAPP");
        assert_eq!(c.spec_label(), "TF");
        assert_eq!(Cell::benchmark(Method::UnweightedB).spec_label(), "-");
    }

    #[test]
    fn masked_design_selects_columns() {
        let r = UnitRecord::nonprob("b0", vec![1.0, 2.0, 3.0], Some(vec![7.0, 8.0]), 0.0);
        let fs = FeatureSet { x: vec![2, 0], d: vec![1] };
        let m = masked_design(std::slice::from_ref(&r), &fs, true).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 1.0, 8.0]);
        let r2 = UnitRecord { d: None, ..r };
        assert!(matches!(masked_design(&[r2], &fs, false), Err(Error::MissingField { .. })));
    }

    #[test]
    fn replication_runs_frequentist_cells() {
        let cells = vec![
            Cell::benchmark(Method::UnweightedB),
            Cell::new(Engine::Glm, Method::Papw, Some(Spec::True), None, VarianceKind::Analytic),
            Cell::new(Engine::Glm, Method::Ipsw, Some(Spec::True), None, VarianceKind::Bootstrap),
            Cell::new(Engine::Glm, Method::Pm, None, Some(Spec::True), VarianceKind::Analytic),
            Cell::new(Engine::Glm, Method::AipwPapw, Some(Spec::True), Some(Spec::True), VarianceKind::Analytic),
            Cell::new(Engine::Glm, Method::AipwPapw, Some(Spec::True), Some(Spec::False), VarianceKind::Analytic),
        ];
        let cfg = small_sim1(cells);
        let r = run_replication(&cfg, 4, None).unwrap();
        let truth = r.truths[0];
        for (k, e) in r.estimates[0].iter().enumerate() {
            let e = e.as_ref().unwrap();
            assert!(e.variance.unwrap() > 0.0, "cell {k}");
            if k > 0 {
                assert!(((e.point - truth) / truth).abs() < 0.15, "cell {k}: {} vs {truth}", e.point);
            }
        }
        assert_eq!(run_replication(&cfg, 4, None).unwrap(), r);
    }

    #[test]
    fn bayes_cells_produce_rubin_variances() {
        let mut cfg = small_sim1(vec![
            Cell::new(Engine::BayesGlm, Method::Papp, Some(Spec::True), None, VarianceKind::Rubin),
            Cell::new(Engine::BayesGlm, Method::Pm, None, Some(Spec::True), VarianceKind::Rubin),
            Cell::new(Engine::BayesGlm, Method::AipwPapw, Some(Spec::True), Some(Spec::True), VarianceKind::Rubin),
        ]);
        cfg.mcmc = McmcConfig { n_draws: 20, burn_in: 200, thinning: 2, ..Default::default() };
        let r = run_replication(&cfg, 9, None).unwrap();
        for e in &r.estimates[0] {
            let e = e.as_ref().unwrap();
            assert!(((e.point - r.truths[0]) / r.truths[0]).abs() < 0.15);
            assert!(e.variance.unwrap() > 0.0);
        }
    }
}
