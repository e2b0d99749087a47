//! Bayesian backfitting over a sum of trees.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};

use super::tree::{Tree, NONE};
use crate::rng::Rng;

pub const P_GROW: f64 = 0.4;
pub const P_PRUNE: f64 = 0.4;

/// Column-major training features with their sorted distinct values.
pub struct Data {
    pub cols: Vec<Vec<f64>>,
    grid: Vec<Vec<f64>>,
    pub n: usize,
}

impl Data {
    pub fn new(cols: Vec<Vec<f64>>, n: usize) -> Self {
        let grid = cols
            .iter()
            .map(|c| {
                let mut v = c.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        Data { cols, grid, n }
    }

    fn range(&self, obs: &[usize], var: usize) -> (f64, f64) {
        let c = &self.cols[var];
        obs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(c[i]), hi.max(c[i])))
    }

    /// Some column takes at least two distinct values on `obs`.
    pub fn splittable(&self, obs: &[usize]) -> bool {
        if obs.len() < 2 {
            return false;
        }
        self.cols.iter().any(|c| {
            let first = c[obs[0]];
            obs.iter().any(|&i| c[i] != first)
        })
    }

    /// Candidate cutpoints per splittable column: training values in [min, max) over `obs`.
    pub fn available(&self, obs: &[usize]) -> Vec<(u32, &[f64])> {
        let mut out = Vec::new();
        if obs.len() < 2 {
            return out;
        }
        for (v, g) in self.grid.iter().enumerate() {
            let (lo, hi) = self.range(obs, v);
            if lo < hi {
                let a = g.partition_point(|&x| x < lo);
                let b = g.partition_point(|&x| x < hi);
                out.push((v as u32, &g[a..b]));
            }
        }
        out
    }

    pub fn partition(&self, obs: &[usize], var: u32, cut: f64) -> (Vec<usize>, Vec<usize>) {
        obs.iter().partition(|&&i| self.cols[var as usize][i] <= cut)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreePrior {
    pub alpha: f64,
    pub beta: f64,
    /// Leaf-value prior variance.
    pub tau: f64,
}

impl TreePrior {
    pub fn p_split(&self, depth: u32, splittable: bool) -> f64 {
        if splittable {
            self.alpha * (1.0 + depth as f64).powf(-self.beta)
        } else {
            0.0
        }
    }
}

/// Log marginal likelihood of a leaf, up to terms shared by all trees.
pub fn leaf_loglik(n: usize, s: f64, sigma2: f64, tau: f64) -> f64 {
    let a = sigma2 + n as f64 * tau;
    0.5 * (sigma2 / a).ln() + tau * s * s / (2.0 * sigma2 * a)
}

fn stats(obs: &[usize], r: &[f64]) -> (usize, f64) {
    (obs.len(), obs.iter().map(|&i| r[i]).sum())
}

/// Inputs shared by the grow and prune ratios.
pub struct SplitStats<'a> {
    pub left: &'a [usize],
    pub right: &'a [usize],
}

/// Log MH ratio for growing `leaf` into the given children.
pub fn grow_log_ratio(
    data: &Data,
    prior: &TreePrior,
    sigma2: f64,
    tree: &Tree,
    leaf: u32,
    split: SplitStats<'_>,
    r: &[f64],
) -> f64 {
    let d = tree.node(leaf).depth;
    let b = tree.n_leaves() as f64;
    let parent = tree.node(leaf).parent;
    let sibling_leaf = parent != NONE && {
        let p = tree.node(parent);
        let sib = if p.left == leaf { p.right } else { p.left };
        tree.node(sib).leaf
    };
    let nog_after = tree.nogs().len() - sibling_leaf as usize + 1;
    let ps = prior.p_split(d, true);
    let psl = prior.p_split(d + 1, data.splittable(split.left));
    let psr = prior.p_split(d + 1, data.splittable(split.right));
    let p_grow = if tree.is_stump() { 1.0 } else { P_GROW };
    let (nl, sl) = stats(split.left, r);
    let (nr, sr) = stats(split.right, r);
    let ll = leaf_loglik(nl, sl, sigma2, prior.tau) + leaf_loglik(nr, sr, sigma2, prior.tau)
        - leaf_loglik(nl + nr, sl + sr, sigma2, prior.tau);
    ps.ln() + (1.0 - psl).ln() + (1.0 - psr).ln() - (1.0 - ps).ln() + P_PRUNE.ln() - (nog_after as f64).ln() - p_grow.ln()
        + b.ln()
        + ll
}

/// Log MH ratio for collapsing the children of `nog`.
pub fn prune_log_ratio(
    data: &Data,
    prior: &TreePrior,
    sigma2: f64,
    tree: &Tree,
    nog: u32,
    split: SplitStats<'_>,
    r: &[f64],
) -> f64 {
    let d = tree.node(nog).depth;
    let b_star = (tree.n_leaves() - 1) as f64;
    let w2 = tree.nogs().len() as f64;
    let p_grow_star = if nog == 0 { 1.0 } else { P_GROW };
    let ps = prior.p_split(d, true);
    let psl = prior.p_split(d + 1, data.splittable(split.left));
    let psr = prior.p_split(d + 1, data.splittable(split.right));
    let (nl, sl) = stats(split.left, r);
    let (nr, sr) = stats(split.right, r);
    let ll = leaf_loglik(nl + nr, sl + sr, sigma2, prior.tau)
        - leaf_loglik(nl, sl, sigma2, prior.tau)
        - leaf_loglik(nr, sr, sigma2, prior.tau);
    (1.0 - ps).ln() + p_grow_star.ln() - b_star.ln() - ps.ln() - (1.0 - psl).ln() - (1.0 - psr).ln() - P_PRUNE.ln() + w2.ln()
        + ll
}

/// Standard normal conditioned on Z > a.
pub(crate) fn trunc_normal_above(a: f64, rng: &mut Rng) -> f64 {
    if a < 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                return z;
            }
        }
    }
    // Exponential rejection with the optimal rate.
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (z - rate) * (z - rate) {
            return z;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct MoveCounts {
    pub proposed: [usize; 3],
    pub accepted: [usize; 3],
}

pub(crate) struct Chain<'a> {
    pub data: &'a Data,
    pub prior: TreePrior,
    pub trees: Vec<Tree>,
    leaf_of: Vec<Vec<u32>>,
    tf: Vec<Vec<f64>>,
    pub fit: Vec<f64>,
    resid: Vec<f64>,
    pub sigma2: f64,
    pub counts: MoveCounts,
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a Data, prior: TreePrior, m: usize, init: f64, sigma2: f64) -> Self {
        let n = data.n;
        let mu = init / m as f64;
        Chain {
            data,
            prior,
            trees: vec![Tree::stump(mu); m],
            leaf_of: vec![vec![0; n]; m],
            tf: vec![vec![mu; n]; m],
            fit: vec![init; n],
            resid: vec![0.0; n],
            sigma2,
            counts: MoveCounts::default(),
        }
    }

    fn obs_in(&self, j: usize, node: u32) -> Vec<usize> {
        self.leaf_of[j].iter().enumerate().filter(|(_, &l)| l == node).map(|(i, _)| i).collect()
    }

    /// One backfitting pass over all trees against response `y`.
    pub fn sweep(&mut self, y: &[f64], rng: &mut Rng) {
        for j in 0..self.trees.len() {
            for i in 0..self.data.n {
                self.resid[i] = y[i] - self.fit[i] + self.tf[j][i];
            }
            self.update_structure(j, rng);
            self.draw_leaves(j, rng);
        }
    }

    fn update_structure(&mut self, j: usize, rng: &mut Rng) {
        let u: f64 = rng.random();
        let kind = if self.trees[j].is_stump() || u < P_GROW {
            0
        } else if u < P_GROW + P_PRUNE {
            1
        } else {
            2
        };
        self.counts.proposed[kind] += 1;
        let accepted = match kind {
            0 => self.grow(j, rng),
            1 => self.prune(j, rng),
            _ => self.change(j, rng),
        };
        if accepted {
            self.counts.accepted[kind] += 1;
        }
    }

    fn grow(&mut self, j: usize, rng: &mut Rng) -> bool {
        let leaves = self.trees[j].leaves();
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let obs = self.obs_in(j, leaf);
        let avail = self.data.available(&obs);
        if avail.is_empty() {
            return false;
        }
        let (var, cuts) = &avail[rng.random_range(0..avail.len())];
        let cut = cuts[rng.random_range(0..cuts.len())];
        let (left, right) = self.data.partition(&obs, *var, cut);
        let lr = grow_log_ratio(
            self.data,
            &self.prior,
            self.sigma2,
            &self.trees[j],
            leaf,
            SplitStats { left: &left, right: &right },
            &self.resid,
        );
        if rng.random::<f64>().ln() < lr {
            let (l, r) = self.trees[j].split(leaf, *var, cut);
            for &i in &left {
                self.leaf_of[j][i] = l;
            }
            for &i in &right {
                self.leaf_of[j][i] = r;
            }
            true
        } else {
            false
        }
    }

    fn prune(&mut self, j: usize, rng: &mut Rng) -> bool {
        let nogs = self.trees[j].nogs();
        let nog = nogs[rng.random_range(0..nogs.len())];
        let (l, r) = {
            let n = self.trees[j].node(nog);
            (n.left, n.right)
        };
        let left = self.obs_in(j, l);
        let right = self.obs_in(j, r);
        let lr = prune_log_ratio(
            self.data,
            &self.prior,
            self.sigma2,
            &self.trees[j],
            nog,
            SplitStats { left: &left, right: &right },
            &self.resid,
        );
        if rng.random::<f64>().ln() < lr {
            self.trees[j].collapse(nog);
            for &i in left.iter().chain(&right) {
                self.leaf_of[j][i] = nog;
            }
            true
        } else {
            false
        }
    }

    fn change(&mut self, j: usize, rng: &mut Rng) -> bool {
        let nogs = self.trees[j].nogs();
        let nog = nogs[rng.random_range(0..nogs.len())];
        let (l, r, d) = {
            let n = self.trees[j].node(nog);
            (n.left, n.right, n.depth)
        };
        let old_l = self.obs_in(j, l);
        let old_r = self.obs_in(j, r);
        let obs: Vec<usize> = {
            let mut v = old_l.clone();
            v.extend(&old_r);
            v
        };
        let avail = self.data.available(&obs);
        let (var, cuts) = &avail[rng.random_range(0..avail.len())];
        let cut = cuts[rng.random_range(0..cuts.len())];
        let (new_l, new_r) = self.data.partition(&obs, *var, cut);
        let (p, s2, r_) = (&self.prior, self.sigma2, &self.resid);
        let ll = |o: &[usize]| {
            let (n, s) = stats(o, r_);
            leaf_loglik(n, s, s2, p.tau) + (1.0 - p.p_split(d + 1, self.data.splittable(o))).ln()
        };
        let lr = ll(&new_l) + ll(&new_r) - ll(&old_l) - ll(&old_r);
        if rng.random::<f64>().ln() < lr {
            let node = self.trees[j].node_mut(nog);
            node.var = *var;
            node.cut = cut;
            for &i in &new_l {
                self.leaf_of[j][i] = l;
            }
            for &i in &new_r {
                self.leaf_of[j][i] = r;
            }
            true
        } else {
            false
        }
    }

    fn draw_leaves(&mut self, j: usize, rng: &mut Rng) {
        let size = self.trees[j].nodes.len();
        let mut n = vec![0usize; size];
        let mut s = vec![0.0; size];
        for (i, &l) in self.leaf_of[j].iter().enumerate() {
            n[l as usize] += 1;
            s[l as usize] += self.resid[i];
        }
        let (s2, tau) = (self.sigma2, self.prior.tau);
        for leaf in self.trees[j].leaves() {
            let a = s2 + n[leaf as usize] as f64 * tau;
            let mean = tau * s[leaf as usize] / a;
            let sd = (s2 * tau / a).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            self.trees[j].node_mut(leaf).mu = mean + sd * z;
        }
        for i in 0..self.data.n {
            let new = self.trees[j].node(self.leaf_of[j][i]).mu;
            self.fit[i] += new - self.tf[j][i];
            self.tf[j][i] = new;
        }
    }

    /// Conjugate draw of σ² given the current fit.
    pub fn draw_sigma2(&mut self, y: &[f64], nu: f64, lambda: f64, rng: &mut Rng) {
        let rss: f64 = y.iter().zip(&self.fit).map(|(y, f)| (y - f).powi(2)).sum();
        let shape = 0.5 * (nu + self.data.n as f64);
        let rate = 0.5 * (nu * lambda + rss);
        let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
        self.sigma2 = 1.0 / g.sample(rng);
    }
}
