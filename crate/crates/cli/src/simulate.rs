//! `simulate`: replicated scenario runs to a metrics table.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use drnp::harness::{run_replications, MetricsSummary};
use drnp::pipeline::{ScenarioConfig, PRESETS};
use drnp::sim::Fk;
use serde::Serialize;

use crate::config::{apply, read_run_file, ModelSection, PopulationSection, RunFile};
use crate::{Failure, EXIT_OK, EXIT_PARTIAL};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario: sim1, sim1-bayes, sim2 or sim3.
    #[arg(long)]
    pub scenario: Option<String>,
    /// TOML run file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Number of replications.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; the table does not depend on this.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Population size (Sim I and II).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of clusters (Sim III); the expected non-probability size scales with it.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Outcome function for Sim II: sin, exp or sqr.
    #[arg(long, value_parser = parse_fk)]
    pub fk: Option<Fk>,
    /// Posterior draws M.
    #[arg(long)]
    pub m: Option<usize>,
    /// Bootstrap replicates B.
    #[arg(long)]
    pub b: Option<usize>,
    /// Keep one population for all replications.
    #[arg(long)]
    pub fixed_population: bool,
    /// Metrics CSV; stdout when absent.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// Also write the full table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_fk(s: &str) -> Result<Fk, String> {
    match s.to_ascii_lowercase().as_str() {
        "sin" => Ok(Fk::Sin),
        "exp" => Ok(Fk::Exp),
        "sqr" => Ok(Fk::Sqr),
        _ => Err(format!("unknown outcome function '{s}'; valid: sin, exp, sqr")),
    }
}

/// Fully resolved simulation request.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationPlan {
    pub scenario: String,
    pub k: usize,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: usize,
    pub config: ScenarioConfig,
}

pub fn plan(args: &SimulateArgs) -> Result<SimulationPlan, Failure> {
    let file = match &args.config {
        Some(p) => read_run_file(p)?,
        None => RunFile::default(),
    };
    let name = args
        .scenario
        .clone()
        .or(file.run.scenario.clone())
        .ok_or_else(|| Failure::config(format!("no scenario given; valid: {}", PRESETS.join(", "))))?;
    let mut cfg = ScenarioConfig::preset(&name).map_err(|e| Failure::config(e.to_string()))?;
    let population = PopulationSection {
        n: args.n.or(file.population.n),
        rho: args.rho.or(file.population.rho),
        fk: args.fk.or(file.population.fk),
        clusters: args.clusters.or(file.population.clusters),
        ..file.population
    };
    let models = ModelSection { draws: args.m.or(file.models.draws), bootstrap: args.b.or(file.models.bootstrap), ..file.models };
    cfg.fixed_population = args.fixed_population || file.run.fixed_population.unwrap_or(false);
    if let Some(o) = file.run.outcomes {
        cfg.outcomes = o;
    }
    apply(&mut cfg, &population, &models)?;
    let k = args.k.or(file.run.k).unwrap_or(100);
    let jobs = args.jobs.or(file.run.jobs).unwrap_or(1);
    if k == 0 {
        return Err(Failure::config("k must be at least 1"));
    }
    if jobs == 0 {
        return Err(Failure::config("jobs must be at least 1"));
    }
    Ok(SimulationPlan { scenario: name, k, seed: args.seed.or(file.run.seed).unwrap_or(0), jobs, config: cfg })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NA".into()
    }
}

/// CSV metrics table; the outcome is appended to the method when there are several.
pub fn to_csv(rows: &[MetricsSummary], multi_outcome: bool) -> String {
    let mut out = String::from("method,spec,rbias,rmse,crci,rse,k_eff\n");
    for r in rows {
        let method = if multi_outcome { format!("{}[{}]", r.method, r.outcome) } else { r.method.clone() };
        let _ = writeln!(
            out,
            "{method},{},{},{},{},{},{}",
            r.spec,
            num(r.rbias_pct),
            num(r.rmse_pct),
            num(r.crci_pct.unwrap_or(f64::NAN)),
            num(r.rse.unwrap_or(f64::NAN)),
            r.k_effective
        );
    }
    out
}

#[derive(Serialize)]
struct JsonTable<'a> {
    schema_version: u32,
    #[serde(flatten)]
    plan: &'a SimulationPlan,
    rows: &'a [MetricsSummary],
}

pub fn to_json(plan: &SimulationPlan, rows: &[MetricsSummary]) -> String {
    serde_json::to_string_pretty(&JsonTable { schema_version: SCHEMA_VERSION, plan, rows }).expect("serializable table")
}

pub fn run(args: SimulateArgs) -> Result<u8, Failure> {
    let plan = plan(&args)?;
    let rows = run_replications(&plan.config, plan.k, plan.seed, plan.jobs).map_err(|e| Failure::config(e.to_string()))?;
    let csv = to_csv(&rows, plan.config.outcome_list().len() > 1);
    match &args.output {
        Some(p) => std::fs::write(p, &csv).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &args.json {
        std::fs::write(p, to_json(&plan, &rows)).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
    }
    let aborted: Vec<String> = rows
        .iter()
        .filter(|r| r.aborted)
        .map(|r| {
            format!("{} {} [{}]: {}", r.method, r.spec, r.outcome, r.first_error.as_deref().unwrap_or("no estimates"))
        })
        .collect();
    if aborted.is_empty() {
        return Ok(EXIT_OK);
    }
    for a in &aborted {
        eprintln!("aborted cell {a}");
    }
    eprintln!("{} cell(s) aborted after more than 10% failed replications", aborted.len());
    Ok(EXIT_PARTIAL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(scenario: &str) -> SimulateArgs {
        SimulateArgs {
            scenario: Some(scenario.into()),
            config: None,
            rho: None,
            k: Some(2),
            seed: Some(1),
            jobs: None,
            n: None,
            clusters: None,
            fk: None,
            m: None,
            b: None,
            fixed_population: false,
            output: None,
            json: None,
        }
    }

    #[test]
    fn unknown_scenario_lists_presets() {
        let e = plan(&args("sim7")).unwrap_err();
        assert_eq!(e.code, crate::EXIT_CONFIG);
        assert!(e.message.contains("sim1, sim1-bayes, sim2, sim3"), "{}", e.message);
    }

    #[test]
    fn flags_override_scenario() {
        let mut a = args("sim1");
        a.rho = Some(0.2);
        a.b = Some(30);
        let p = plan(&a).unwrap();
        assert_eq!(p.config.bootstrap_replicates, 30);
        assert_eq!((p.k, p.seed, p.jobs), (2, 1, 1));
    }

    #[test]
    fn csv_layout() {
        let row = MetricsSummary {
            method: "GLM-PAPW".into(),
            spec: "T".into(),
            outcome: "y".into(),
            k_effective: 5,
            failures: 0,
            rbias_pct: -1.5,
            rmse_pct: 2.0,
            crci_pct: None,
            rse: Some(1.0),
            truth: 9.0,
            aborted: false,
            first_error: None,
        };
        let s = to_csv(std::slice::from_ref(&row), false);
        assert_eq!(s, "method,spec,rbias,rmse,crci,rse,k_eff\nGLM-PAPW,T,-1.5000,2.0000,NA,1.0000,5\n");
        assert!(to_csv(&[row], true).contains("GLM-PAPW[y]"));
    }
}
