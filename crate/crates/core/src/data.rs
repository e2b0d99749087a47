//! Combined-sample data structures.
//!
//! Records are stored with the non-probability rows (`z = 1`) first, followed
//! by the reference rows (`z = 0`). All row-indexed vectors in the crate use
//! this order.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    pub cluster_id: Option<String>,
    pub x: Vec<f64>,
    pub d: Option<Vec<f64>>,
    pub y: Option<f64>,
    pub pi_r: Option<f64>,
    pub z: u8,
}

impl UnitRecord {
    pub fn reference(id: impl Into<String>, x: Vec<f64>, d: Option<Vec<f64>>, pi_r: f64) -> Self {
        UnitRecord { id: id.into(), cluster_id: None, x, d, y: None, pi_r: Some(pi_r), z: 0 }
    }

    pub fn nonprob(id: impl Into<String>, x: Vec<f64>, d: Option<Vec<f64>>, y: f64) -> Self {
        UnitRecord { id: id.into(), cluster_id: None, x, d, y: Some(y), pi_r: None, z: 1 }
    }

    pub fn with_pi_r(mut self, pi_r: f64) -> Self {
        self.pi_r = Some(pi_r);
        self
    }

    pub fn with_cluster(mut self, c: impl Into<String>) -> Self {
        self.cluster_id = Some(c.into());
        self
    }

    pub fn with_y(mut self, y: f64) -> Self {
        self.y = Some(y);
        self
    }
}

/// Column counts of x and d; x* = [x, d].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateLayout {
    pub p: usize,
    pub q: usize,
}

impl CovariateLayout {
    pub fn x_star(&self) -> usize {
        self.p + self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Covariates {
    X,
    D,
    XStar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSample {
    records: Vec<UnitRecord>,
    n_b: usize,
    n_r: usize,
    population_size: Option<f64>,
    layout: CovariateLayout,
    outcome: OutcomeKind,
}

fn check_prob(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidValue {
            field: field.to_string(),
            reason: format!("{v} not in (0,1]"),
        });
    }
    Ok(())
}

/// Validate and assemble the combined sample.
pub fn build_combined(
    reference_rows: Vec<UnitRecord>,
    nonprob_rows: Vec<UnitRecord>,
    population_size: Option<f64>,
) -> Result<CombinedSample> {
    if nonprob_rows.is_empty() {
        return Err(Error::EmptySample("non-probability"));
    }
    if reference_rows.is_empty() {
        return Err(Error::EmptySample("reference"));
    }
    if let Some(n) = population_size {
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidValue { field: "population_size".into(), reason: format!("{n}") });
        }
    }
    let p = nonprob_rows[0].x.len();
    let mut q = None;
    let mut seen = HashSet::with_capacity(reference_rows.len() + nonprob_rows.len());
    for r in &nonprob_rows {
        if r.z != 1 {
            return Err(Error::InvalidValue { field: "z".into(), reason: format!("row {} in S_B has z={}", r.id, r.z) });
        }
        match r.y {
            None => return Err(Error::missing_on("y", &r.id)),
            Some(y) if !y.is_finite() => {
                return Err(Error::InvalidValue { field: "y".into(), reason: format!("row {}: {y}", r.id) })
            }
            _ => {}
        }
        if let Some(pr) = r.pi_r {
            check_prob("pi_r", pr)?;
        }
    }
    for r in &reference_rows {
        if r.z != 0 {
            return Err(Error::InvalidValue { field: "z".into(), reason: format!("row {} in S_R has z={}", r.id, r.z) });
        }
        match r.pi_r {
            None => return Err(Error::missing_on("pi_r", &r.id)),
            Some(pr) => check_prob("pi_r", pr)?,
        }
    }
    for r in nonprob_rows.iter().chain(&reference_rows) {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
        if r.x.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: r.x.len() });
        }
        if r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue { field: "x".into(), reason: format!("non-finite on row {}", r.id) });
        }
        if let Some(d) = &r.d {
            match q {
                None => q = Some(d.len()),
                Some(q0) if q0 != d.len() => return Err(Error::DimensionMismatch { expected: q0, got: d.len() }),
                _ => {}
            }
        }
    }
    drop(seen);
    let n_b = nonprob_rows.len();
    let n_r = reference_rows.len();
    let mut records = nonprob_rows;
    records.extend(reference_rows);
    Ok(CombinedSample {
        records,
        n_b,
        n_r,
        population_size,
        layout: CovariateLayout { p, q: q.unwrap_or(0) },
        outcome: OutcomeKind::Continuous,
    })
}

impl CombinedSample {
    pub fn with_outcome(mut self, kind: OutcomeKind) -> Self {
        self.outcome = kind;
        self
    }

    pub fn with_population_size(mut self, n: Option<f64>) -> Self {
        self.population_size = n;
        self
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n(&self) -> usize {
        self.n_b + self.n_r
    }

    pub fn population_size(&self) -> Option<f64> {
        self.population_size
    }

    pub fn layout(&self) -> CovariateLayout {
        self.layout
    }

    pub fn outcome(&self) -> OutcomeKind {
        self.outcome
    }

    pub fn b_records(&self) -> &[UnitRecord] {
        &self.records[..self.n_b]
    }

    pub fn r_records(&self) -> &[UnitRecord] {
        &self.records[self.n_b..]
    }

    /// Membership indicator in record order.
    pub fn z(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.z as f64).collect()
    }

    /// Outcomes on S_B.
    pub fn y_b(&self) -> Vec<f64> {
        self.b_records().iter().map(|r| r.y.expect("validated")).collect()
    }

    /// Reference inclusion probabilities on S_R.
    pub fn pi_r_r(&self) -> Vec<f64> {
        self.r_records().iter().map(|r| r.pi_r.expect("validated")).collect()
    }

    /// Reference inclusion probabilities on S_B, when known for every row.
    pub fn pi_r_b(&self) -> Result<Vec<f64>> {
        self.b_records()
            .iter()
            .map(|r| r.pi_r.ok_or_else(|| Error::missing_on("pi_r", &r.id)))
            .collect()
    }

    /// Reference inclusion probabilities for all rows (requires them on S_B too).
    pub fn pi_r_all(&self) -> Result<Vec<f64>> {
        let mut v = self.pi_r_b()?;
        v.extend(self.pi_r_r());
        Ok(v)
    }

    /// N̂_R = Σ_{S_R} 1/π^R.
    pub fn n_hat_r(&self) -> f64 {
        self.r_records().iter().map(|r| 1.0 / r.pi_r.expect("validated")).sum()
    }

    /// Known N if supplied, otherwise N̂_R.
    pub fn n_or_hat(&self) -> f64 {
        self.population_size.unwrap_or_else(|| self.n_hat_r())
    }

    pub fn design_matrix(&self, which: Covariates, intercept: bool) -> Result<DMatrix<f64>> {
        design_matrix(self, which, intercept)
    }
}

fn push_row(out: &mut Vec<f64>, r: &UnitRecord, which: Covariates, q: usize) -> Result<()> {
    let d = || -> Result<&[f64]> {
        if q == 0 {
            return Ok(&[]);
        }
        r.d.as_deref().ok_or_else(|| Error::missing_on("d", &r.id))
    };
    match which {
        Covariates::X => out.extend_from_slice(&r.x),
        Covariates::D => out.extend_from_slice(d()?),
        Covariates::XStar => {
            out.extend_from_slice(&r.x);
            out.extend_from_slice(d()?);
        }
    }
    Ok(())
}

/// Design matrix in record order; layout `[intercept?, x, d]`.
pub fn design_matrix(sample: &CombinedSample, which: Covariates, intercept: bool) -> Result<DMatrix<f64>> {
    let CovariateLayout { p, q } = sample.layout;
    if which == Covariates::D && q == 0 {
        return Err(Error::missing("d"));
    }
    let width = match which {
        Covariates::X => p,
        Covariates::D => q,
        Covariates::XStar => p + q,
    } + intercept as usize;
    let mut data = Vec::with_capacity(width * sample.n());
    for r in &sample.records {
        if intercept {
            data.push(1.0);
        }
        push_row(&mut data, r, which, q)?;
    }
    Ok(DMatrix::from_row_slice(sample.n(), width, &data))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupOverlap {
    pub n: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    pub below_floor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub floor: f64,
    pub nonprob: GroupOverlap,
    pub reference: GroupOverlap,
    pub below_floor: usize,
}

pub const DEFAULT_POSITIVITY_FLOOR: f64 = 1e-4;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn group(values: &[f64], floor: f64) -> GroupOverlap {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    GroupOverlap {
        n: s.len(),
        min: s[0],
        q05: quantile(&s, 0.05),
        median: quantile(&s, 0.5),
        q95: quantile(&s, 0.95),
        max: s[s.len() - 1],
        below_floor: s.iter().filter(|&&v| v < floor).count(),
    }
}

/// Overlap diagnostics of fitted propensities by sample membership.
pub fn positivity_report(sample: &CombinedSample, propensities: &[f64], floor: f64) -> Result<PositivityReport> {
    if propensities.len() != sample.n() {
        return Err(Error::LengthMismatch { expected: sample.n(), got: propensities.len() });
    }
    let nonprob = group(&propensities[..sample.n_b], floor);
    let reference = group(&propensities[sample.n_b..], floor);
    Ok(PositivityReport { floor, below_floor: nonprob.below_floor + reference.below_floor, nonprob, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> CombinedSample {
        let r = vec![
            UnitRecord::reference("r1", vec![1.0], Some(vec![0.5]), 0.1),
            UnitRecord::reference("r2", vec![2.0], Some(vec![0.6]), 0.2),
        ];
        let b = vec![
            UnitRecord::nonprob("b1", vec![3.0], Some(vec![0.1]), 1.0),
            UnitRecord::nonprob("b2", vec![4.0], Some(vec![0.2]), 2.0),
            UnitRecord::nonprob("b3", vec![5.0], Some(vec![0.3]), 3.0),
        ];
        build_combined(r, b, None).unwrap()
    }

    #[test]
    fn counts() {
        let s = small();
        assert_eq!((s.n_r(), s.n_b()), (2, 3));
    }

    #[test]
    fn duplicate_id() {
        let r = vec![UnitRecord::reference("u7", vec![1.0], None, 0.1)];
        let b = vec![UnitRecord::nonprob("u7", vec![1.0], None, 1.0)];
        assert_eq!(build_combined(r, b, None), Err(Error::DuplicateId("u7".into())));
    }

    #[test]
    fn missing_y() {
        let r = vec![UnitRecord::reference("r", vec![1.0], None, 0.1)];
        let mut b = UnitRecord::nonprob("b", vec![1.0], None, 1.0);
        b.y = None;
        match build_combined(r, vec![b], None) {
            Err(Error::MissingField { field, .. }) => assert_eq!(field, "y"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_side() {
        let b = vec![UnitRecord::nonprob("b", vec![1.0], None, 1.0)];
        assert_eq!(build_combined(vec![], b, None), Err(Error::EmptySample("reference")));
    }

    #[test]
    fn intercept_column() {
        let r = vec![UnitRecord::reference("r", vec![1.0], None, 0.1)];
        let b = vec![UnitRecord::nonprob("b1", vec![2.0], None, 1.0), UnitRecord::nonprob("b2", vec![3.0], None, 1.0)];
        let s = build_combined(r, b, None).unwrap();
        let m = s.design_matrix(Covariates::X, true).unwrap();
        assert_eq!(m.shape(), (3, 2));
        assert!(m.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(m[(2, 1)], 1.0);
    }

    #[test]
    fn x_star_widths() {
        let r = vec![UnitRecord::reference("r", vec![1.0, 2.0], Some(vec![9.0]), 0.1)];
        let b = vec![
            UnitRecord::nonprob("b1", vec![2.0, 3.0], Some(vec![8.0]), 1.0),
            UnitRecord::nonprob("b2", vec![3.0, 4.0], Some(vec![7.0]), 1.0),
        ];
        let s = build_combined(r, b, None).unwrap();
        assert_eq!(s.design_matrix(Covariates::XStar, false).unwrap().ncols(), 3);
        let m = s.design_matrix(Covariates::XStar, true).unwrap();
        assert_eq!(m.ncols(), 4);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 8.0]);
    }

    #[test]
    fn missing_d() {
        let r = vec![UnitRecord::reference("r", vec![1.0], None, 0.1)];
        let b = vec![UnitRecord::nonprob("b1", vec![2.0], Some(vec![1.0]), 1.0)];
        let s = build_combined(r, b, None).unwrap();
        match s.design_matrix(Covariates::D, false) {
            Err(Error::MissingField { field, .. }) => assert_eq!(field, "d"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn positivity() {
        let s = small();
        let rep = positivity_report(&s, &[0.5; 5], DEFAULT_POSITIVITY_FLOOR).unwrap();
        assert_eq!(rep.below_floor, 0);
        assert_eq!(rep.nonprob.min, rep.reference.min);
        assert_eq!(rep.nonprob.max, rep.reference.max);
        let rep = positivity_report(&s, &[0.5, 0.5, 1e-6, 0.5, 0.5], 1e-4).unwrap();
        assert_eq!(rep.below_floor, 1);
        assert_eq!(
            positivity_report(&s, &[0.5; 4], 1e-4),
            Err(Error::LengthMismatch { expected: 5, got: 4 })
        );
    }

    fn arb_rows() -> impl Strategy<Value = (Vec<UnitRecord>, Vec<UnitRecord>)> {
        (1usize..6, 1usize..6, 0usize..4, any::<bool>(), 0u8..3).prop_map(|(nr, nb, dup, drop_y, q)| {
            let mut r: Vec<_> = (0..nr)
                .map(|i| UnitRecord::reference(format!("id{i}"), vec![i as f64], Some(vec![0.0; q as usize]), 0.5))
                .collect();
            let mut b: Vec<_> = (0..nb)
                .map(|i| UnitRecord::nonprob(format!("id{}", i + 10), vec![i as f64], Some(vec![1.0; q as usize]), 1.0))
                .collect();
            if dup < nr.min(nb) {
                b[dup].id = r[dup].id.clone();
            }
            if drop_y {
                b[nb - 1].y = None;
            }
            r.rotate_left(1);
            (r, b)
        })
    }

    proptest! {
        #[test]
        fn validation_is_order_insensitive((r, b) in arb_rows(), rot in 0usize..5) {
            let base = build_combined(r.clone(), b.clone(), None).is_ok();
            let mut r2 = r.clone();
            let mut b2 = b.clone();
            let k = rot % r2.len();
            r2.rotate_right(k);
            b2.reverse();
            prop_assert_eq!(base, build_combined(r2, b2, None).is_ok());
        }

        #[test]
        fn x_star_is_x_plus_d(p in 1usize..4, q in 0usize..4, n in 1usize..5, icpt in any::<bool>()) {
            let r = vec![UnitRecord::reference("r", vec![0.0; p], Some(vec![0.0; q]), 0.5)];
            let b: Vec<_> = (0..n).map(|i| UnitRecord::nonprob(format!("b{i}"), vec![1.0; p], Some(vec![1.0; q]), 1.0)).collect();
            let s = build_combined(r, b, None).unwrap();
            let xs = s.design_matrix(Covariates::XStar, icpt).unwrap().ncols();
            let x = s.design_matrix(Covariates::X, false).unwrap().ncols();
            prop_assert_eq!(xs, x + q + icpt as usize);
        }
    }
}
