//! Variance estimators: PAPW sandwich, doubly robust asymptotic variance,
//! Rao–Wu rescaling bootstrap and Rubin's multiple-imputation rules.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{build_combined, CombinedSample, UnitRecord};
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_variance, spd_solve};
use crate::rng::{derive, label, stream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub estimator: String,
    /// Assembled variance floored at zero; see `negative`.
    pub variance: f64,
    pub components: BTreeMap<String, f64>,
    /// The assembled value before flooring was negative.
    pub negative: bool,
}

impl VarianceReport {
    fn assembled(estimator: &str, value: f64, components: BTreeMap<String, f64>) -> Self {
        VarianceReport { estimator: estimator.into(), variance: value.max(0.0), components, negative: value < 0.0 }
    }

    /// Raw assembled value, possibly negative.
    pub fn raw(&self) -> f64 {
        self.components.get("assembled").copied().unwrap_or(self.variance)
    }
}

fn comps(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Sandwich variance of the PAPW mean with known π^R.
///
/// `p` holds the fitted propensities for every row of S and `x_star` the
/// record-ordered design used in the propensity model.
pub fn sandwich_papw(
    sample: &CombinedSample,
    pib: &[f64],
    p: &[f64],
    x_star: &DMatrix<f64>,
    point: f64,
) -> Result<VarianceReport> {
    let (n, n_b, k) = (sample.n(), sample.n_b(), x_star.ncols());
    if pib.len() != n_b {
        return Err(Error::LengthMismatch { expected: n_b, got: pib.len() });
    }
    if p.len() != n || x_star.nrows() != n {
        return Err(Error::LengthMismatch { expected: n, got: p.len().min(x_star.nrows()) });
    }
    let big_n = sample.n_or_hat();
    let y = sample.y_b();
    let r: Vec<f64> = (0..n_b).map(|i| (y[i] - point) / pib[i]).collect();
    let mut h = DMatrix::zeros(k, k);
    for i in 0..n {
        let xi = x_star.row(i);
        h += p[i] * xi.transpose() * xi;
    }
    let mut g = DVector::zeros(k);
    let mut c = DVector::zeros(k);
    let mut t1 = 0.0;
    for i in 0..n_b {
        let xi = x_star.row(i).transpose();
        g += r[i] * &xi;
        c += (1.0 - p[i]) * r[i] * &xi;
        t1 += (1.0 - pib[i]) * r[i] * r[i];
    }
    // b̂ = H⁻¹ g; the 1/N factors cancel.
    let b = spd_solve(&h, &g).map_err(|_| Error::SingularMatrix)?;
    let n2 = big_n * big_n;
    let t1 = t1 / n2;
    let t2 = -2.0 * b.dot(&c) / n2;
    let t3 = (b.transpose() * &h * &b)[(0, 0)] / n2;
    let v = t1 + t2 + t3;
    let mut components = comps(&[("term1", t1), ("term2", t2), ("term3", t3), ("assembled", v)]);
    for (j, bj) in b.iter().enumerate() {
        components.insert(format!("b_{j}"), *bj);
    }
    Ok(VarianceReport::assembled("sandwich", v, components))
}

/// V̂₁ + V̂₂ − B̂(V̂₂) for the plug-in AIPW estimator with known π^R.
///
/// `m` is the outcome prediction for every row of S and `sigma2` the
/// conditional outcome variance for every row.
pub fn chen_dr_variance(sample: &CombinedSample, pib: &[f64], m: &[f64], sigma2: &[f64]) -> Result<VarianceReport> {
    let (n, n_b) = (sample.n(), sample.n_b());
    if pib.len() != n_b {
        return Err(Error::LengthMismatch { expected: n_b, got: pib.len() });
    }
    if m.len() != n || sigma2.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: m.len().min(sigma2.len()) });
    }
    let pi_r = sample.pi_r_r();
    let n_hat = sample.n_hat_r();
    let m_r = &m[n_b..];
    let y_pm: f64 = m_r.iter().zip(&pi_r).map(|(m, p)| m / p).sum::<f64>() / n_hat;
    let v1 = m_r.iter().zip(&pi_r).map(|(m, p)| (1.0 - p) * (m - y_pm).powi(2) / (p * p)).sum::<f64>() / (n_hat * n_hat);
    let big_n = sample.n_or_hat();
    let n2 = big_n * big_n;
    let y = sample.y_b();
    let v2 = (0..n_b).map(|i| (1.0 - pib[i]) / (pib[i] * pib[i]) * (y[i] - m[i]).powi(2)).sum::<f64>() / n2;
    let bias = ((0..n_b).map(|i| sigma2[i] / pib[i]).sum::<f64>()
        - (0..pi_r.len()).map(|j| sigma2[n_b + j] / pi_r[j]).sum::<f64>())
        / n2;
    let v = v1 + v2 - bias;
    Ok(VarianceReport::assembled(
        "chen_dr",
        v,
        comps(&[("V1", v1), ("V2", v2), ("B(V2)", bias), ("assembled", v)]),
    ))
}

/// Variance of the prediction-model mean: the design variance of the
/// imputed values plus gᵀVg, where g is the gradient of the weighted mean of
/// the predictions with respect to the outcome-model coefficients.
pub fn pm_variance(sample: &CombinedSample, yhat_r: &[f64], grad: &DVector<f64>, vcov: &DMatrix<f64>) -> Result<VarianceReport> {
    let pi_r = sample.pi_r_r();
    if yhat_r.len() != pi_r.len() {
        return Err(Error::LengthMismatch { expected: pi_r.len(), got: yhat_r.len() });
    }
    if vcov.nrows() != grad.len() || vcov.ncols() != grad.len() {
        return Err(Error::DimensionMismatch { expected: grad.len(), got: vcov.nrows() });
    }
    let n_hat = sample.n_hat_r();
    let ybar = yhat_r.iter().zip(&pi_r).map(|(y, p)| y / p).sum::<f64>() / n_hat;
    let v1 = yhat_r.iter().zip(&pi_r).map(|(y, p)| (1.0 - p) * (y - ybar).powi(2) / (p * p)).sum::<f64>() / (n_hat * n_hat);
    let v2 = (grad.transpose() * vcov * grad)[(0, 0)];
    let v = v1 + v2;
    Ok(VarianceReport::assembled("pm", v, comps(&[("design", v1), ("model", v2), ("assembled", v)])))
}

/// Rubin's rules: mean within variance plus (1 + 1/M) times the between variance.
pub fn rubin_combine(points: &[f64], within: &[f64]) -> Result<VarianceReport> {
    let m = points.len();
    if within.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: within.len() });
    }
    if m < 2 {
        return Err(Error::TooFewDraws(m));
    }
    let vw = mean(within);
    let vb = sample_variance(points);
    let v = vw + (1.0 + 1.0 / m as f64) * vb;
    Ok(VarianceReport::assembled("rubin", v, comps(&[("within", vw), ("between", vb), ("assembled", v)])))
}

/// Per-draw quantities needed by the within-draw variance approximation.
#[derive(Debug, Clone, Copy)]
pub struct DrawComponents<'a> {
    /// π̂ᴮ on S_B for this draw.
    pub pib: &'a [f64],
    /// Imputed outcomes on S_R for this draw.
    pub yhat_r: &'a [f64],
}

fn group_indices(ids: impl Iterator<Item = Option<String>>) -> Vec<Vec<usize>> {
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, id) in ids.enumerate() {
        match id {
            None => order.push(vec![i]),
            Some(c) => {
                let k = *pos.entry(c).or_insert_with(|| {
                    order.push(Vec::new());
                    order.len() - 1
                });
                order[k].push(i);
            }
        }
    }
    order
}

/// Approximate within-draw variance of the Hájek AIPW mean.
///
/// With `clustered`, outcome terms are cluster totals, weights are cluster
/// means of the unit weights and counts are cluster counts. Units without a
/// cluster id form singleton clusters, so unclustered data give the unit form.
pub fn within_variance_approx(sample: &CombinedSample, draw: DrawComponents<'_>, clustered: bool) -> Result<f64> {
    within_variance_terms(sample, draw, clustered).map(|(a, b)| a + b)
}

/// The pseudo-weighting and the prediction terms of [`within_variance_approx`].
pub fn within_variance_terms(sample: &CombinedSample, draw: DrawComponents<'_>, clustered: bool) -> Result<(f64, f64)> {
    let (n_b, n_r) = (sample.n_b(), sample.n_r());
    if draw.pib.len() != n_b {
        return Err(Error::LengthMismatch { expected: n_b, got: draw.pib.len() });
    }
    if draw.yhat_r.len() != n_r {
        return Err(Error::LengthMismatch { expected: n_r, got: draw.yhat_r.len() });
    }
    let cl = |recs: &[UnitRecord]| {
        if clustered {
            group_indices(recs.iter().map(|r| r.cluster_id.clone()))
        } else {
            (0..recs.len()).map(|i| vec![i]).collect()
        }
    };
    let y = sample.y_b();
    let wb: Vec<f64> = draw.pib.iter().map(|p| 1.0 / p).collect();
    let n_hat_b: f64 = wb.iter().sum();
    let gb = cl(sample.b_records());
    let yb_tot: Vec<f64> = gb.iter().map(|g| g.iter().map(|&i| y[i]).sum()).collect();
    let ab: Vec<f64> = gb.iter().map(|g| g.iter().map(|&i| wb[i]).sum::<f64>() / g.len() as f64).collect();
    let var_y = if yb_tot.len() > 1 { sample_variance(&yb_tot) } else { 0.0 };
    let term1 = var_y * ab.iter().map(|a| a * a).sum::<f64>() / (n_hat_b * n_hat_b);

    let wr: Vec<f64> = sample.pi_r_r().iter().map(|p| 1.0 / p).collect();
    let n_hat_r: f64 = wr.iter().sum();
    let t_hat: f64 = draw.yhat_r.iter().zip(&wr).map(|(y, w)| y * w).sum();
    let ybar = t_hat / n_hat_r;
    let gr = cl(sample.r_records());
    let ar: Vec<f64> = gr.iter().map(|g| g.iter().map(|&i| wr[i]).sum::<f64>() / g.len() as f64).collect();
    let var_w = if ar.len() > 1 { sample_variance(&ar) } else { 0.0 };
    let dev: f64 = gr
        .iter()
        .map(|g| {
            let tot: f64 = g.iter().map(|&i| draw.yhat_r[i]).sum();
            (tot - g.len() as f64 * ybar).powi(2)
        })
        .sum();
    let term2 = var_w * dev / (n_hat_r * n_hat_r);
    Ok((term1, term2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Resample PSUs (cluster ids) instead of units.
    pub cluster_aware: bool,
    /// Largest tolerated fraction of failed replicates.
    pub max_fail_frac: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 200, seed: 0, cluster_aware: false, max_fail_frac: 0.05 }
    }
}

fn resample_side(
    recs: &[UnitRecord],
    cluster_aware: bool,
    rescale_pi_r: bool,
    rng: &mut crate::rng::Rng,
    tag: &str,
) -> Result<Vec<UnitRecord>> {
    let groups = if cluster_aware {
        group_indices(recs.iter().map(|r| r.cluster_id.clone()))
    } else {
        (0..recs.len()).map(|i| vec![i]).collect()
    };
    let g = groups.len();
    if g < 2 {
        return Err(Error::Precondition(format!("bootstrap needs at least 2 sampling units in {tag}")));
    }
    let mut counts = vec![0usize; g];
    for _ in 0..g - 1 {
        counts[rng.random_range(0..g)] += 1;
    }
    let scale = (g - 1) as f64 / g as f64;
    let mut out = Vec::new();
    for (k, &h) in counts.iter().enumerate() {
        for copy in 0..h {
            for &i in &groups[k] {
                let mut r = recs[i].clone();
                r.id = format!("{}#{copy}", r.id);
                if cluster_aware {
                    r.cluster_id = r.cluster_id.map(|c| format!("{c}#{copy}"));
                }
                if rescale_pi_r {
                    r.pi_r = r.pi_r.map(|p| p * scale);
                }
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Replicate `b` of the Rao–Wu bootstrap.
///
/// Selected units appear once per draw; reference inclusion probabilities are
/// multiplied by (n_R − 1)/n_R, so a unit drawn h times carries total weight
/// w·n_R/(n_R − 1)·h.
pub fn bootstrap_replicate(sample: &CombinedSample, seed: u64, b: usize, cluster_aware: bool) -> Result<CombinedSample> {
    let mut rng = stream(derive(seed, label::BOOTSTRAP), b as u64);
    let nb = resample_side(sample.b_records(), cluster_aware, false, &mut rng, "S_B")?;
    let nr = resample_side(sample.r_records(), cluster_aware, true, &mut rng, "S_R")?;
    Ok(build_combined(nr, nb, sample.population_size())?.with_outcome(sample.outcome()))
}

/// Bootstrap variances for several estimators evaluated on the same replicates.
///
/// `estimator` returns one result per estimator, in a fixed order. Failed
/// replicates are dropped per estimator; more than `max_fail_frac` failures
/// abort that estimator with `BootstrapFailed`.
pub fn rao_wu_bootstrap_multi<F>(
    sample: &CombinedSample,
    config: &BootstrapConfig,
    n_estimators: usize,
    estimator: F,
) -> Result<Vec<Result<VarianceReport>>>
where
    F: Fn(&CombinedSample) -> Vec<Result<f64>> + Sync,
{
    if config.replicates < 2 {
        return Err(Error::Precondition("bootstrap needs B >= 2".into()));
    }
    let results: Vec<Vec<Result<f64>>> = (0..config.replicates)
        .into_par_iter()
        .map(|b| match bootstrap_replicate(sample, config.seed, b, config.cluster_aware) {
            Ok(s) => {
                let mut v = estimator(&s);
                v.resize_with(n_estimators, || Err(Error::Precondition("estimator returned too few values".into())));
                v
            }
            Err(e) => vec![Err(e); n_estimators],
        })
        .collect();
    let total = config.replicates;
    Ok((0..n_estimators)
        .map(|k| {
            let mut ok = Vec::with_capacity(total);
            let mut first = None;
            for r in &results {
                match &r[k] {
                    Ok(v) if v.is_finite() => ok.push(*v),
                    Ok(v) => {
                        first.get_or_insert_with(|| format!("non-finite estimate {v}"));
                    }
                    Err(e) => {
                        first.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let failed = total - ok.len();
            if failed as f64 > config.max_fail_frac * total as f64 || ok.len() < 2 {
                return Err(Error::BootstrapFailed { failed, total, first: first.unwrap_or_default() });
            }
            let mu = mean(&ok);
            let v = ok.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / ok.len() as f64;
            Ok(VarianceReport::assembled(
                "bootstrap",
                v,
                comps(&[("replicates", ok.len() as f64), ("failed", failed as f64), ("mean", mu)]),
            ))
        })
        .collect())
}

pub fn rao_wu_bootstrap<F>(sample: &CombinedSample, config: &BootstrapConfig, estimator: F) -> Result<VarianceReport>
where
    F: Fn(&CombinedSample) -> Result<f64> + Sync,
{
    rao_wu_bootstrap_multi(sample, config, 1, |s| vec![estimator(s)])?.remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::hajek_mean;
    use proptest::prelude::*;

    fn small(n_b: usize, n_r: usize) -> CombinedSample {
        let b = (0..n_b)
            .map(|i| UnitRecord::nonprob(format!("b{i}"), vec![i as f64], None, 1.0 + i as f64).with_pi_r(0.1))
            .collect();
        let r = (0..n_r)
            .map(|i| UnitRecord::reference(format!("r{i}"), vec![i as f64 * 0.5], None, 0.05 + 0.01 * i as f64))
            .collect();
        build_combined(r, b, Some(200.0)).unwrap()
    }

    #[test]
    fn rubin_examples() {
        let v = rubin_combine(&[3.0, 3.0, 3.0], &[0.7, 0.7, 0.7]).unwrap();
        assert!((v.variance - 0.7).abs() < 1e-15);
        let v = rubin_combine(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((v.variance - 3.0).abs() < 1e-15);
        assert_eq!(rubin_combine(&[1.0], &[1.0]), Err(Error::TooFewDraws(1)));
    }

    proptest! {
        #[test]
        fn rubin_monotone_in_between(spread in 0.0f64..5.0, extra in 0.0f64..5.0, w in 0.0f64..3.0) {
            let a = rubin_combine(&[-spread, spread], &[w, w]).unwrap();
            let b = rubin_combine(&[-spread - extra, spread + extra], &[w, w]).unwrap();
            prop_assert!(b.variance >= a.variance);
        }
    }

    #[test]
    fn within_hand_oracle() {
        // S_B: y = (1,2,4), π̂ᴮ = (0.5, 0.25, 0.2); S_R: π^R = (0.5, 0.25, 0.1), ŷ = (1,3,2).
        let b = vec![
            UnitRecord::nonprob("b1", vec![0.0], None, 1.0),
            UnitRecord::nonprob("b2", vec![0.0], None, 2.0),
            UnitRecord::nonprob("b3", vec![0.0], None, 4.0),
        ];
        let r = vec![
            UnitRecord::reference("r1", vec![0.0], None, 0.5),
            UnitRecord::reference("r2", vec![0.0], None, 0.25),
            UnitRecord::reference("r3", vec![0.0], None, 0.1),
        ];
        let s = build_combined(r, b, None).unwrap();
        let v = within_variance_approx(&s, DrawComponents { pib: &[0.5, 0.25, 0.2], yhat_r: &[1.0, 3.0, 2.0] }, false).unwrap();
        // var(y) = 7/3, Σ1/π̂² = 4+16+25 = 45, N̂_B = 11 → 105/121.
        // var(1/π^R) over (2,4,10) = 52/3, N̂_R = 16, t̂ = 2+12+20 = 34, ȳ = 34/16.
        // brace = 14 + 3·(34/16)² − 2·(34/16)·6 = 14 + 867/64 − 51/2 = 131/64.
        let oracle = 105.0 / 121.0 + (52.0 / 3.0) * (131.0 / 64.0) / 256.0;
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
        // Equal π^R drops the second term.
        let r2 = (0..3).map(|i| UnitRecord::reference(format!("r{i}"), vec![0.0], None, 0.2)).collect();
        let s2 = build_combined(r2, s.b_records().to_vec(), None).unwrap();
        let v2 = within_variance_approx(&s2, DrawComponents { pib: &[0.5, 0.25, 0.2], yhat_r: &[1.0, 3.0, 2.0] }, false).unwrap();
        assert!((v2 - 105.0 / 121.0).abs() < 1e-12);
    }

    #[test]
    fn pm_variance_hand_oracle() {
        let b = vec![UnitRecord::nonprob("b1", vec![0.0], None, 1.0)];
        let r = vec![UnitRecord::reference("r1", vec![0.0], None, 0.5), UnitRecord::reference("r2", vec![0.0], None, 0.25)];
        let s = build_combined(r, b, None).unwrap();
        // N̂ = 6, ȳ = (2 + 12)/6 = 7/3; design = (0.5·(4/3)²·4 + 0.75·(2/3)²·16)/36 = (32/9 + 48/9)/36.
        let g = DVector::from_vec(vec![1.0, 2.0]);
        let vc = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let v = pm_variance(&s, &[1.0, 3.0], &g, &vc).unwrap();
        let oracle = 80.0 / 9.0 / 36.0 + (0.5 + 0.4 + 0.8);
        assert!((v.variance - oracle).abs() < 1e-12, "{} vs {oracle}", v.variance);
        assert!(pm_variance(&s, &[1.0], &g, &vc).is_err());
    }

    #[test]
    fn within_single_b_unit_keeps_second_term_only() {
        let s = small(1, 4);
        let yhat = [1.0, 2.0, 3.0, 5.0];
        let v = within_variance_approx(&s, DrawComponents { pib: &[0.3], yhat_r: &yhat }, false).unwrap();
        let s0 = within_variance_approx(&s, DrawComponents { pib: &[0.3], yhat_r: &[0.0; 4] }, false).unwrap();
        assert_eq!(s0, 0.0);
        assert!(v > 0.0);
    }

    #[test]
    fn within_singleton_clusters_equal_unit_form() {
        let s = small(5, 4);
        let recs_b: Vec<_> = s.b_records().iter().cloned().enumerate().map(|(i, r)| r.with_cluster(format!("cb{i}"))).collect();
        let recs_r: Vec<_> = s.r_records().iter().cloned().enumerate().map(|(i, r)| r.with_cluster(format!("cr{i}"))).collect();
        let sc = build_combined(recs_r, recs_b, Some(200.0)).unwrap();
        let d = DrawComponents { pib: &[0.1, 0.2, 0.3, 0.2, 0.1], yhat_r: &[1.0, 2.0, 0.5, 4.0] };
        let a = within_variance_approx(&s, d, false).unwrap();
        let b = within_variance_approx(&sc, d, true).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn sandwich_constant_y_is_zero_and_collinear_is_singular() {
        let b = (0..5)
            .map(|i| UnitRecord::nonprob(format!("b{i}"), vec![i as f64], None, 3.0).with_pi_r(0.1))
            .collect();
        let r = (0..4).map(|i| UnitRecord::reference(format!("r{i}"), vec![i as f64], None, 0.1)).collect();
        let s = build_combined(r, b, Some(100.0)).unwrap();
        let x = s.design_matrix(crate::data::Covariates::X, true).unwrap();
        let p = vec![0.4; 9];
        let pib: Vec<f64> = vec![0.1 * 0.4 / 0.6; 5];
        let v = sandwich_papw(&s, &pib, &p, &x, 3.0).unwrap();
        assert_eq!(v.variance, 0.0);
        let xc = DMatrix::from_fn(9, 2, |i, _| x[(i, 1)]);
        assert_eq!(sandwich_papw(&s, &pib, &p, &xc, 3.0).err(), Some(Error::SingularMatrix));
    }

    #[test]
    fn sandwich_matches_direct_formula() {
        let s = small(6, 5);
        let x = s.design_matrix(crate::data::Covariates::X, true).unwrap();
        let p: Vec<f64> = (0..11).map(|i| 0.2 + 0.05 * i as f64).collect();
        let pib: Vec<f64> = (0..6).map(|i| 0.1 * p[i] / (1.0 - p[i])).collect();
        let w: Vec<f64> = pib.iter().map(|v| 1.0 / v).collect();
        let point = hajek_mean(&s.y_b(), &w).unwrap();
        let rep = sandwich_papw(&s, &pib, &p, &x, point).unwrap();
        // Direct evaluation with explicit 1/N factors and an explicit inverse.
        let n = 200.0;
        let y = s.y_b();
        let mut h = DMatrix::<f64>::zeros(2, 2);
        for i in 0..11 {
            let xi = DVector::from_vec(vec![x[(i, 0)], x[(i, 1)]]);
            h += (p[i] / n) * &xi * xi.transpose();
        }
        let mut g = DVector::<f64>::zeros(2);
        let mut c = DVector::<f64>::zeros(2);
        let mut t1 = 0.0;
        for i in 0..6 {
            let xi = DVector::from_vec(vec![x[(i, 0)], x[(i, 1)]]);
            let r = (y[i] - point) / pib[i];
            g += (r / n) * &xi;
            c += ((1.0 - p[i]) * r) * &xi;
            t1 += (1.0 - pib[i]) * r * r;
        }
        let bt = g.transpose() * h.clone().try_inverse().unwrap();
        let direct = t1 / (n * n) - 2.0 * (&bt * &c)[(0, 0)] / (n * n) + (&bt * (&h / n) * bt.transpose())[(0, 0)];
        assert!((rep.raw() - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn chen_degenerate_cases() {
        let s = small(4, 3);
        let y = s.y_b();
        let mut m: Vec<f64> = y.clone();
        m.extend([1.0, 2.0, 3.0]);
        let sig = vec![0.0; 7];
        let r = chen_dr_variance(&s, &[0.3, 0.2, 0.4, 0.5], &m, &sig).unwrap();
        assert_eq!(r.components["V2"], 0.0);
        let mut m2 = vec![0.0; 4];
        m2.extend([1.0, 2.0, 3.0]);
        let r = chen_dr_variance(&s, &[1.0; 4], &m2, &sig).unwrap();
        assert_eq!(r.components["V2"], 0.0);
    }

    #[test]
    fn chen_negative_is_flagged() {
        let s = small(3, 3);
        let mut m = s.y_b();
        m.extend([1.0, 1.0, 1.0]);
        let sig = [10.0, 10.0, 10.0, 0.0, 0.0, 0.0];
        let r = chen_dr_variance(&s, &[0.01, 0.01, 0.01], &m, &sig).unwrap();
        assert!(r.negative);
        assert_eq!(r.variance, 0.0);
        assert!(r.raw() < 0.0);
    }

    #[test]
    fn replicate_weight_substitution() {
        // w = 10, n_R = 5, h = 2 → 25.
        let w = 10.0f64;
        let scaled_pi = (1.0 / w) * 4.0 / 5.0;
        assert!((2.0 / scaled_pi - 25.0).abs() < 1e-12);
        let s = small(6, 5);
        let rep = bootstrap_replicate(&s, 1, 0, false).unwrap();
        assert_eq!(rep.n_b(), 5);
        assert_eq!(rep.n_r(), 4);
        for r in rep.r_records() {
            let base = s.r_records().iter().find(|o| r.id.starts_with(&format!("{}#", o.id))).unwrap();
            assert!((r.pi_r.unwrap() - base.pi_r.unwrap() * 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let s = small(8, 6);
        let cfg = BootstrapConfig { replicates: 50, seed: 7, ..Default::default() };
        let c = rao_wu_bootstrap(&s, &cfg, |_| Ok(4.2)).unwrap();
        assert!(c.variance < 1e-28);
        let est = |x: &CombinedSample| hajek_mean(&x.y_b(), &vec![1.0; x.n_b()]);
        let a = rao_wu_bootstrap(&s, &cfg, est).unwrap();
        let b = rao_wu_bootstrap(&s, &cfg, est).unwrap();
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
        assert!(a.variance > 0.0);
    }

    #[test]
    fn bootstrap_failure_policy() {
        let s = small(8, 6);
        let cfg = BootstrapConfig { replicates: 40, seed: 1, ..Default::default() };
        let flaky = |x: &CombinedSample| {
            if x.b_records()[0].id.starts_with("b0#") {
                Err(Error::SingularDesign)
            } else {
                Ok(1.0)
            }
        };
        match rao_wu_bootstrap(&s, &cfg, flaky) {
            Err(Error::BootstrapFailed { total: 40, .. }) => {}
            other => panic!("{other:?}"),
        }
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let one_fail = |_: &CombinedSample| {
            if calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed) == 0 {
                Err(Error::SingularDesign)
            } else {
                Ok(2.0)
            }
        };
        let v = rao_wu_bootstrap(&s, &cfg, one_fail).unwrap();
        assert_eq!(v.components["failed"], 1.0);
    }

    #[test]
    fn cluster_bootstrap_resamples_psus() {
        let b: Vec<UnitRecord> = (0..12)
            .map(|i| UnitRecord::nonprob(format!("b{i}"), vec![0.0], None, (i / 4) as f64).with_cluster(format!("c{}", i / 4)))
            .collect();
        let r = (0..4).map(|i| UnitRecord::reference(format!("r{i}"), vec![0.0], None, 0.1).with_cluster(format!("k{i}"))).collect();
        let s = build_combined(r, b, None).unwrap();
        let rep = bootstrap_replicate(&s, 3, 0, true).unwrap();
        assert_eq!(rep.n_b(), 8);
        assert_eq!(rep.n_r(), 3);
        for r in rep.r_records() {
            assert!((r.pi_r.unwrap() - 0.1 * 0.75).abs() < 1e-15);
        }
    }
}
