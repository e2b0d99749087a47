//! K-replication experiments and repeated-sampling metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{mean, sample_variance};
use crate::pipeline::{run_replication, ReplicationResult, ScenarioConfig};
use crate::rng::{derive, label};

/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959964;

/// A cell is aborted when more than this share of replications fail.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

/// Metrics for one (outcome, cell) row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub method: String,
    pub spec: String,
    pub outcome: String,
    pub k_effective: usize,
    pub failures: usize,
    pub rbias_pct: f64,
    pub rmse_pct: f64,
    /// `None` when the cell produces no variance.
    pub crci_pct: Option<f64>,
    pub rse: Option<f64>,
    /// Mean of the per-replication truths.
    pub truth: f64,
    pub aborted: bool,
    pub first_error: Option<String>,
}

/// rBias, rMSE, crCI, rSE against one fixed truth.
pub fn compute_metrics(points: &[f64], variances: &[f64], truth: f64) -> Result<MetricsSummary> {
    if variances.len() != points.len() {
        return Err(Error::LengthMismatch { expected: points.len(), got: variances.len() });
    }
    compute_metrics_paired(points, Some(variances), &vec![truth; points.len()])
}

/// Metrics when replication k has its own truth `truths[k]`.
///
/// Errors are scaled by their own truth before averaging; with a constant
/// truth this is the fixed-truth formula.
pub fn compute_metrics_paired(points: &[f64], variances: Option<&[f64]>, truths: &[f64]) -> Result<MetricsSummary> {
    let k = points.len();
    if truths.len() != k {
        return Err(Error::LengthMismatch { expected: k, got: truths.len() });
    }
    if let Some(v) = variances {
        if v.len() != k {
            return Err(Error::LengthMismatch { expected: k, got: v.len() });
        }
    }
    if k == 0 {
        return Err(Error::EmptySample("replications"));
    }
    if truths.contains(&0.0) {
        return Err(Error::ZeroTruth);
    }
    let rel: Vec<f64> = points.iter().zip(truths).map(|(p, t)| (p - t) / t).collect();
    let rbias = 100.0 * mean(&rel);
    let rmse = 100.0 * (rel.iter().map(|e| e * e).sum::<f64>() / k as f64).sqrt();
    let (crci, rse) = match variances {
        Some(v) => {
            let se: Vec<f64> = v.iter().map(|v| v.max(0.0).sqrt()).collect();
            let covered = points
                .iter()
                .zip(truths)
                .zip(&se)
                .filter(|((p, t), s)| (*p - *t).abs() <= Z975 * **s)
                .count();
            let errors: Vec<f64> = points.iter().zip(truths).map(|(p, t)| p - t).collect();
            let rse = if k >= 2 { mean(&se) / sample_variance(&errors).sqrt() } else { f64::NAN };
            (Some(100.0 * covered as f64 / k as f64), Some(rse))
        }
        None => (None, None),
    };
    Ok(MetricsSummary {
        method: String::new(),
        spec: String::new(),
        outcome: String::new(),
        k_effective: k,
        failures: 0,
        rbias_pct: rbias,
        rmse_pct: rmse,
        crci_pct: crci,
        rse,
        truth: mean(truths),
        aborted: false,
        first_error: None,
    })
}

/// Seed of replication `k` under a run seed.
pub fn replication_seed(seed: u64, k: usize) -> u64 {
    derive(seed, k as u64)
}

/// Run `k` replications on a pool of `jobs` threads and summarise every cell.
///
/// Rows are ordered by outcome, then by configured cell; the table does not
/// depend on `jobs`.
pub fn run_replications(cfg: &ScenarioConfig, k: usize, seed: u64, jobs: usize) -> Result<Vec<MetricsSummary>> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::ConfigInvalid("K must be at least 1".into()));
    }
    if jobs == 0 {
        return Err(Error::ConfigInvalid("jobs must be at least 1".into()));
    }
    let fixed = if cfg.fixed_population {
        Some(cfg.scenario.generate(derive(seed, label::POPULATION))?)
    } else {
        None
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;
    let reps: Vec<Result<ReplicationResult>> = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|i| run_replication(cfg, replication_seed(seed, i), fixed.as_ref()))
            .collect()
    });
    Ok(summarise(cfg, &reps))
}

/// Aggregate replication results into one row per (outcome, cell).
pub fn summarise(cfg: &ScenarioConfig, reps: &[Result<ReplicationResult>]) -> Vec<MetricsSummary> {
    let k = reps.len();
    let mut rows = Vec::new();
    for (o, outcome) in cfg.outcome_list().iter().enumerate() {
        for (c, cell) in cfg.cells.iter().enumerate() {
            let mut points = Vec::new();
            let mut variances = Vec::new();
            let mut truths = Vec::new();
            let mut has_var = true;
            let mut first_error = None;
            for rep in reps {
                let est = rep.as_ref().map_err(Clone::clone).and_then(|r| {
                    r.estimates[o][c].clone().map(|e| (e, r.truths[o]))
                });
                match est {
                    Ok((e, t)) => {
                        points.push(e.point);
                        truths.push(t);
                        match e.variance {
                            Some(v) => variances.push(v),
                            None => has_var = false,
                        }
                    }
                    Err(e) => {
                        first_error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let failures = k - points.len();
            let aborted = failures as f64 > MAX_FAILURE_SHARE * k as f64 || points.is_empty();
            let computed = if aborted {
                None
            } else {
                match compute_metrics_paired(&points, has_var.then_some(&variances[..]), &truths) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        first_error.get_or_insert_with(|| e.to_string());
                        None
                    }
                }
            };
            let base = computed.unwrap_or(MetricsSummary {
                method: String::new(),
                spec: String::new(),
                outcome: String::new(),
                k_effective: points.len(),
                failures,
                rbias_pct: f64::NAN,
                rmse_pct: f64::NAN,
                crci_pct: None,
                rse: None,
                truth: if truths.is_empty() { f64::NAN } else { mean(&truths) },
                aborted: true,
                first_error: None,
            });
            rows.push(MetricsSummary {
                method: cell.label(),
                spec: cell.spec_label(),
                outcome: outcome.clone(),
                failures,
                first_error,
                ..base
            });
        }
    }
    rows
}
