//! TOML run files for `simulate`; every key can be overridden by a flag.

use std::path::Path;

use drnp::pipeline::{Scenario, ScenarioConfig};
use drnp::sim::Fk;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub population: PopulationSection,
    #[serde(default)]
    pub models: ModelSection,
}

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scenario: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub fixed_population: Option<bool>,
    pub outcomes: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub n: Option<usize>,
    pub rho: Option<f64>,
    pub n_r: Option<f64>,
    pub n_b: Option<f64>,
    pub fk: Option<Fk>,
    pub clusters: Option<usize>,
    pub cluster_size: Option<usize>,
    pub icc: Option<f64>,
}

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Posterior draws for Bayesian engines and tree ensembles.
    pub draws: Option<usize>,
    pub burn_in: Option<usize>,
    pub thinning: Option<usize>,
    pub trees: Option<usize>,
    pub probit_trees: Option<usize>,
    pub bootstrap: Option<usize>,
    pub joint_aipw: Option<bool>,
}

pub fn read_run_file(path: &Path) -> Result<RunFile, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_file(&text).map_err(|m| Failure::config(format!("{}: {m}", path.display())))
}

pub fn parse_run_file(text: &str) -> Result<RunFile, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

/// Layer population and model settings onto a preset.
pub fn apply(cfg: &mut ScenarioConfig, p: &PopulationSection, m: &ModelSection) -> Result<(), Failure> {
    match &mut cfg.scenario {
        Scenario::Sim1(c) => {
            set(&mut c.n, p.n);
            set(&mut c.rho, p.rho);
            set(&mut c.n_r, p.n_r);
            set(&mut c.n_b, p.n_b);
            reject("fk", p.fk.is_some())?;
            reject("clusters", p.clusters.is_some() || p.cluster_size.is_some() || p.icc.is_some())?;
        }
        Scenario::Sim2(c) => {
            set(&mut c.n, p.n);
            set(&mut c.rho, p.rho);
            set(&mut c.n_r, p.n_r);
            set(&mut c.n_b, p.n_b);
            set(&mut c.fk, p.fk);
            reject("clusters", p.clusters.is_some() || p.cluster_size.is_some() || p.icc.is_some())?;
        }
        Scenario::Sim3(c) => {
            if let Some(a) = p.clusters {
                *c = c.with_clusters(a);
            }
            set(&mut c.rho, p.rho);
            set(&mut c.n_r, p.n_r);
            set(&mut c.n_b, p.n_b);
            set(&mut c.n_alpha, p.cluster_size);
            set(&mut c.icc, p.icc);
            reject("fk", p.fk.is_some())?;
            reject("n", p.n.is_some())?;
        }
    }
    if let Some(d) = m.draws {
        cfg.mcmc.n_draws = d;
        cfg.bart.n_draws = d;
    }
    if let Some(b) = m.burn_in {
        cfg.mcmc.burn_in = b;
        cfg.bart.burn_in = b;
    }
    if let Some(t) = m.thinning {
        cfg.mcmc.thinning = t;
        cfg.bart.thinning = t;
    }
    set(&mut cfg.bart.m, m.trees);
    set(&mut cfg.bart_probit_trees, m.probit_trees);
    set(&mut cfg.bootstrap_replicates, m.bootstrap);
    set(&mut cfg.joint_aipw, m.joint_aipw);
    cfg.bart.validate().map_err(|e| Failure::config(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::config(e.to_string()))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn reject(key: &str, present: bool) -> Result<(), Failure> {
    if present {
        Err(Failure::config(format!("population.{key} does not apply to this scenario")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_apply() {
        let f = parse_run_file(
            "[run]\nscenario = \"sim2\"\nk = 3\n\n[population]\nrho = 0.3\nfk = \"sqr\"\n\n[models]\ndraws = 40\n",
        )
        .unwrap();
        assert_eq!(f.run.scenario.as_deref(), Some("sim2"));
        let mut cfg = ScenarioConfig::preset("sim2").unwrap();
        apply(&mut cfg, &f.population, &f.models).unwrap();
        match cfg.scenario {
            Scenario::Sim2(c) => assert_eq!((c.rho, c.fk), (0.3, Fk::Sqr)),
            _ => unreachable!(),
        }
        assert_eq!((cfg.mcmc.n_draws, cfg.bart.n_draws), (40, 40));
    }

    #[test]
    fn unknown_keys_name_the_line() {
        let e = parse_run_file("[run]\nk = 3\nkk = 4\n").unwrap_err();
        assert!(e.contains("line 3"), "{e}");
        assert!(e.contains("kk"), "{e}");
    }

    #[test]
    fn inapplicable_keys_are_rejected() {
        let mut cfg = ScenarioConfig::preset("sim1").unwrap();
        let p = PopulationSection { fk: Some(Fk::Exp), ..Default::default() };
        assert!(apply(&mut cfg, &p, &ModelSection::default()).is_err());
    }
}
