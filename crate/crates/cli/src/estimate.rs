//! `estimate`: one estimator and variance on user-supplied samples.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use drnp::aipw::{aipw_point, pm_point, Diag, EstimateReport, Normalization};
use drnp::csv_io::{read_units_path, UnitTable};
use drnp::data::{build_combined, CombinedSample, OutcomeKind};
use drnp::pipeline::{evaluate_cells, pseudo_inclusion, Cell, Engine, Method, ScenarioConfig, VarianceKind};
use drnp::sim::{FeatureSet, SpecMasks, Spec};
use drnp::weights::pseudo_weighted_mean;
use drnp::Error;
use serde::Serialize;

use crate::simulate::SCHEMA_VERSION;
use crate::{Failure, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Papw,
    Papp,
    Ipsw,
    Pm,
    AipwPapw,
    AipwPapp,
    AipwIpsw,
}

impl MethodArg {
    fn method(self) -> Method {
        match self {
            MethodArg::Papw => Method::Papw,
            MethodArg::Papp => Method::Papp,
            MethodArg::Ipsw => Method::Ipsw,
            MethodArg::Pm => Method::Pm,
            MethodArg::AipwPapw => Method::AipwPapw,
            MethodArg::AipwPapp => Method::AipwPapp,
            MethodArg::AipwIpsw => Method::AipwIpsw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    Glm,
    Bglm,
    Bart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Analytic,
    Bootstrap,
    Rubin,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Hajek,
    KnownN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutcomeArg {
    Auto,
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NuisanceArg {
    /// Fit the working models.
    Fit,
    /// Use the `pib` and `mhat` columns of the input files.
    Supplied,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Non-probability sample CSV (needs y).
    #[arg(long)]
    pub nonprob: PathBuf,
    /// Reference sample CSV (needs pi_r).
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "glm")]
    pub engine: EngineArg,
    #[arg(long, value_enum, default_value = "none")]
    pub variance: VarianceArg,
    /// Posterior draws M.
    #[arg(long, default_value_t = 200)]
    pub m: usize,
    /// Bootstrap replicates B.
    #[arg(long, default_value_t = 200)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Population size N; implies known-N normalization unless overridden.
    #[arg(long)]
    pub population_size: Option<f64>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormArg>,
    #[arg(long, value_enum, default_value = "auto")]
    pub outcome: OutcomeArg,
    #[arg(long, value_enum, default_value = "fit")]
    pub nuisance: NuisanceArg,
    /// Solve the AIPW-PAPW estimating equations jointly.
    #[arg(long)]
    pub joint: bool,
    /// JSON report; stdout when absent.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// Pseudo-weights of the non-probability units as CSV.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub engine: String,
    pub n_b: usize,
    pub n_r: usize,
    #[serde(flatten)]
    pub estimate: EstimateReport,
}

fn hint(e: &Error) -> String {
    let extra = match e {
        Error::MissingField { field, .. } if field == "pi_r" => {
            "; PAPW needs pi_r on every non-probability row, PAPP needs it on the reference sample only"
        }
        Error::MissingField { field, .. } if field == "y" => "; the non-probability file must carry the outcome",
        Error::MissingN => "; pass --population-size or use --normalization hajek",
        Error::Separation => "; the samples are separable on these covariates, drop or coarsen columns",
        Error::OutOfRange { .. } => "; fitted pseudo-inclusion probabilities leave (0, 1), consider PAPP or IPSW",
        Error::ConfigInvalid(_) => "; see --help for valid method, engine and variance combinations",
        _ => "",
    };
    format!("{e}{extra}")
}

fn load(path: &Path, z: u8) -> Result<UnitTable, Failure> {
    read_units_path(path, z).map_err(|e| Failure::config(format!("{}: {}", path.display(), hint(&e))))
}

fn is_binary(y: &[f64]) -> bool {
    y.iter().all(|&v| v == 0.0 || v == 1.0)
}

pub struct Inputs {
    pub sample: CombinedSample,
    pub b: UnitTable,
    pub r: UnitTable,
}

pub fn read_inputs(args: &EstimateArgs) -> Result<Inputs, Failure> {
    let b = load(&args.nonprob, 1)?;
    let r = load(&args.reference, 0)?;
    let sample = build_combined(r.records.clone(), b.records.clone(), args.population_size)
        .map_err(|e| Failure::config(hint(&e)))?;
    let kind = match args.outcome {
        OutcomeArg::Continuous => OutcomeKind::Continuous,
        OutcomeArg::Binary => OutcomeKind::Binary,
        OutcomeArg::Auto if is_binary(&sample.y_b()) => OutcomeKind::Binary,
        OutcomeArg::Auto => OutcomeKind::Continuous,
    };
    Ok(Inputs { sample: sample.with_outcome(kind), b, r })
}

fn normalization(args: &EstimateArgs) -> Normalization {
    match (args.normalization, args.population_size) {
        (Some(NormArg::Hajek), _) => Normalization::Hajek,
        (Some(NormArg::KnownN), _) => Normalization::KnownN,
        (None, Some(_)) => Normalization::KnownN,
        (None, None) => Normalization::Hajek,
    }
}

pub fn cell(args: &EstimateArgs) -> Cell {
    let method = args.method.method();
    let engine = match args.engine {
        EngineArg::Glm => Engine::Glm,
        EngineArg::Bglm => Engine::BayesGlm,
        EngineArg::Bart => Engine::Bart,
    };
    let variance = match args.variance {
        VarianceArg::Analytic => VarianceKind::Analytic,
        VarianceArg::Bootstrap => VarianceKind::Bootstrap,
        VarianceArg::Rubin => VarianceKind::Rubin,
        VarianceArg::None => VarianceKind::None,
    };
    let qr = (!matches!(method, Method::Pm)).then_some(Spec::True);
    let pm = method.uses_pm().then_some(Spec::True);
    Cell::new(engine, method, qr, pm, variance)
}

fn column(v: &Option<Vec<Option<f64>>>, name: &str, file: &Path) -> Result<Vec<f64>, Failure> {
    let v = v.as_ref().ok_or_else(|| Failure::config(format!("{}: missing column {name:?}", file.display())))?;
    v.iter()
        .enumerate()
        .map(|(i, x)| x.ok_or_else(|| Failure::config(format!("{}: empty {name:?} on row {}", file.display(), i + 1))))
        .collect()
}

fn supplied(args: &EstimateArgs, inp: &Inputs, norm: Normalization) -> Result<(EstimateReport, Option<Vec<f64>>), Failure> {
    if args.variance != VarianceArg::None {
        return Err(Failure::config("supplied nuisance values support --variance none only"));
    }
    let c = cell(args);
    let fail = |e: Error| Failure::partial(hint(&e));
    let tag = format!("SUPPLIED-{}", c.method.tag());
    let (point, pib) = match c.method {
        Method::Pm => (pm_point(&inp.sample, &column(&inp.r.mhat, "mhat", &args.reference)?).map_err(fail)?, None),
        m if m.uses_pm() => {
            let pib = column(&inp.b.pib, "pib", &args.nonprob)?;
            let m_b = column(&inp.b.mhat, "mhat", &args.nonprob)?;
            let m_r = column(&inp.r.mhat, "mhat", &args.reference)?;
            (aipw_point(&inp.sample, &pib, &m_b, &m_r, norm).map_err(fail)?, Some(pib))
        }
        _ => {
            let pib = column(&inp.b.pib, "pib", &args.nonprob)?;
            (pseudo_weighted_mean(&inp.sample, &pib).map_err(fail)?, Some(pib))
        }
    };
    Ok((EstimateReport::new(tag, point, None, 0), pib))
}

fn fitted(args: &EstimateArgs, inp: &Inputs, norm: Normalization) -> Result<(EstimateReport, Option<Vec<f64>>), Failure> {
    let c = cell(args);
    c.validate().map_err(|e| Failure::config(hint(&e)))?;
    let mut cfg = ScenarioConfig::preset("sim1").expect("built-in preset");
    cfg.cells = vec![c];
    cfg.normalization = norm;
    cfg.joint_aipw = args.joint;
    cfg.mcmc.n_draws = args.m;
    cfg.bart.n_draws = args.m;
    cfg.bootstrap_replicates = args.b;
    if c.variance == VarianceKind::Bootstrap && args.b < 2 {
        return Err(Failure::config("--b must be at least 2"));
    }
    let layout = inp.sample.layout();
    let masks = SpecMasks::uniform(FeatureSet::all(layout.p, layout.q));
    let est = evaluate_cells(&cfg, &inp.sample, &masks, None, args.seed)
        .pop()
        .expect("one cell")
        .map_err(|e| Failure::partial(hint(&e)))?;
    let count = match c.variance {
        VarianceKind::Bootstrap => args.b,
        VarianceKind::Rubin => args.m,
        _ if c.engine != Engine::Glm => args.m,
        _ => 0,
    };
    let pib = match (&args.weights_out, c.method.uses_qr()) {
        (Some(_), true) => {
            Some(pseudo_inclusion(&cfg, &inp.sample, &masks, &c, args.seed).map_err(|e| Failure::partial(hint(&e)))?)
        }
        _ => None,
    };
    let report = EstimateReport::new(c.label(), est.point, est.variance, count)
        .with_diag("variance_kind", Diag::Text(format!("{:?}", c.variance).to_lowercase()));
    Ok((report, pib))
}

fn write_weights(path: &Path, inp: &Inputs, pib: &[f64]) -> Result<(), Failure> {
    let mut out = String::from("id,pib,weight\n");
    for (r, p) in inp.sample.b_records().iter().zip(pib) {
        out.push_str(&format!("{},{p},{}\n", r.id, 1.0 / p));
    }
    std::fs::write(path, out).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn build_report(args: &EstimateArgs) -> Result<(Report, Option<Vec<f64>>, Inputs), Failure> {
    let inp = read_inputs(args)?;
    let norm = normalization(args);
    if norm == Normalization::KnownN && args.population_size.is_none() {
        return Err(Failure::config("--normalization known-n needs --population-size"));
    }
    let (estimate, pib) = match args.nuisance {
        NuisanceArg::Supplied => supplied(args, &inp, norm)?,
        NuisanceArg::Fit => fitted(args, &inp, norm)?,
    };
    let estimate = estimate.with_diag("normalization", Diag::Text(format!("{norm:?}")));
    let report = Report {
        schema_version: SCHEMA_VERSION,
        engine: format!("{:?}", args.engine).to_lowercase(),
        n_b: inp.sample.n_b(),
        n_r: inp.sample.n_r(),
        estimate,
    };
    Ok((report, pib, inp))
}

pub fn run(args: EstimateArgs) -> Result<u8, Failure> {
    if args.weights_out.is_some() && !args.method.method().uses_qr() {
        return Err(Failure::config("--weights-out needs a pseudo-weighting or AIPW method"));
    }
    let (report, pib, inp) = build_report(&args)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable report");
    if let (Some(path), Some(pib)) = (&args.weights_out, &pib) {
        write_weights(path, &inp, pib)?;
    }
    match &args.output {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    Ok(EXIT_OK)
}
