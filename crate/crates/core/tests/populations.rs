use drnp::sim::{gen_sim1, gen_sim2, gen_sim3, Fk, Sim1Config, Sim2Config, Sim3Config};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn sim1_moments() {
    let pop = gen_sim1(&Sim1Config::default(), 101).unwrap();
    let y = &pop.outcome("y").unwrap().values;
    assert!((mean(y) - 9.278).abs() <= 0.05, "{}", mean(y));
    let s: Vec<f64> = (0..pop.size()).map(|i| pop.x.iter().map(|c| c[i]).sum()).collect();
    assert!((corr(y, &s) - 0.5).abs() <= 0.01);
    assert!((pop.pi_b.iter().sum::<f64>() / 1000.0 - 1.0).abs() <= 1e-3);
    assert!((pop.pi_r.iter().sum::<f64>() / 100.0 - 1.0).abs() <= 1e-3);
    let (lo, hi) = pop.pi_r.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!((hi / lo - 50.0).abs() < 1e-6);
}

#[test]
fn sim2_square_term_and_outcome_correlation() {
    let cfg = Sim2Config { fk: Fk::Sqr, ..Default::default() };
    let pop = gen_sim2(&cfg, 102).unwrap();
    let f = &pop.x[1];
    assert!((2.0 * mean(f) - 2.0 / 3.0).abs() <= 0.01);
    let (x, d) = (&pop.x[0], &pop.d[0]);
    let signal: Vec<f64> = (0..pop.size()).map(|i| 2.0 * f[i] - d[i] * d[i] + 0.5 * x[i] * d[i]).collect();
    assert!((corr(&pop.outcome("y").unwrap().values, &signal) - 0.5).abs() <= 0.01);
    assert!((corr(x, d) - 0.2).abs() <= 0.01);
}

#[test]
fn sim2_uncorrelated_pair() {
    let cfg = Sim2Config { rho: 0.0, n: 200_000, ..Default::default() };
    let pop = gen_sim2(&cfg, 103).unwrap();
    assert!(corr(&pop.x[0], &pop.d[0]).abs() <= 0.01);
}

/// One-way ANOVA intraclass correlation over equal-size clusters.
fn anova_icc(v: &[f64], size: usize) -> f64 {
    let groups: Vec<&[f64]> = v.chunks(size).collect();
    let a = groups.len() as f64;
    let n = size as f64;
    let grand = mean(v);
    let msb = groups.iter().map(|g| n * (mean(g) - grand).powi(2)).sum::<f64>() / (a - 1.0);
    let msw = groups.iter().map(|g| {
        let m = mean(g);
        g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    });
    let msw = msw.sum::<f64>() / (a * (n - 1.0));
    let s2b = (msb - msw) / n;
    s2b / (s2b + msw)
}

#[test]
fn sim3_cluster_structure() {
    let cfg = Sim3Config { a: 400, n_alpha: 200, ..Default::default() };
    let pop = gen_sim3(&cfg, 104).unwrap();
    let yc = &pop.outcome("yc").unwrap().values;
    let (x1, x2, d) = (&pop.x[0], &pop.x[3], &pop.d[0]);
    let resid: Vec<f64> = (0..pop.size())
        .map(|i| {
            yc[i] - (1.0 + 0.5 * x1[i].powi(2) + 0.4 * x1[i].powi(3) - 0.3 * x2[i] - 0.2 * x1[i] * x2[i] - 0.1 * d[i])
        })
        .collect();
    let icc = anova_icc(&resid, cfg.n_alpha);
    assert!((0.15..=0.25).contains(&icc), "{icc}");
    let clusters = pop.clusters.as_ref().unwrap();
    assert_eq!(clusters.pi_r.len(), 400);
    assert!((clusters.pi_r.iter().sum::<f64>() / 100.0 - 1.0).abs() <= 1e-3);
    for k in 0..400 {
        let rows = &pop.x[0][k * 200..(k + 1) * 200];
        assert!(rows.iter().all(|&v| v == rows[0]));
    }
}

/// Full-size Sim III means, averaged over independent populations.
#[test]
fn sim3_full_size_means() {
    let k = 8.0;
    let (mut yc, mut yb, mut x2) = (0.0, 0.0, 0.0);
    for s in 0..8u64 {
        let pop = gen_sim3(&Sim3Config::default(), 900 + s).unwrap();
        assert_eq!(pop.size(), 1_000_000);
        yc += pop.outcome("yc").unwrap().mean / k;
        yb += pop.outcome("yb").unwrap().mean / k;
        x2 += mean(&pop.x[3]) / k;
    }
    assert!((yc - 3.39).abs() <= 0.05, "{yc}");
    assert!((yb - 0.40).abs() <= 0.01, "{yb}");
    assert!((x2 - 0.5).abs() <= 0.01, "{x2}");
}

#[test]
fn same_seed_same_population() {
    let cfg = Sim2Config { n: 5000, ..Default::default() };
    assert_eq!(gen_sim2(&cfg, 7).unwrap(), gen_sim2(&cfg, 7).unwrap());
    assert_ne!(gen_sim2(&cfg, 7).unwrap().x, gen_sim2(&cfg, 8).unwrap().x);
}
