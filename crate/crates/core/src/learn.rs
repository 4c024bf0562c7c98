//! Recursive structure learning of conditional circuits.
//!
//! At each call on a row subset and a set of target variables:
//!
//! 1. a single target becomes a GLM leaf;
//! 2. too few rows (or the depth limit) gives a fully factorized product;
//! 3. otherwise the targets are split by pairwise conditional independence
//!    tests given `X`, and more than one component gives a product;
//! 4. otherwise the rows are clustered and a gating node is emitted whose
//!    softmax gate is fitted to predict the cluster from `x`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::{Distribution, StandardNormal};

use crate::circuit::{Circuit, CircuitError, GatingFunction, Node, NodeId, Scope};
use crate::citest::{split_columns, CiError, PairExecutor, RcotConfig, SerialPairs};
use crate::data::{shuffle, uniform_index, Dataset};
use crate::lbfgs::{self, LbfgsControl};
use crate::leaves::{fit_irwls, Family, FitControl, LeafError};
use crate::math::{self, log, sqrt};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    KMeans,
    RandomSplit,
}

impl ClusterMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kmeans" => Some(ClusterMethod::KMeans),
            "random_split" => Some(ClusterMethod::RandomSplit),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClusterMethod::KMeans => "kmeans",
            ClusterMethod::RandomSplit => "random_split",
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnParams {
    /// Nodes with fewer rows are fully factorized.
    pub min_instances: usize,
    pub alpha: f64,
    pub clusters: usize,
    pub cluster_method: ClusterMethod,
    pub seed: u64,
    /// Also factorize once a node holds at most this fraction of all rows.
    pub min_frac: Option<f64>,
    /// Also factorize at this recursion depth.
    pub max_depth: Option<usize>,
    pub leaf_fit: FitControl,
    /// L2 penalty of the gating regression.
    pub gate_ridge: f64,
    pub ci: RcotConfig,
}

impl Default for LearnParams {
    fn default() -> Self {
        LearnParams {
            min_instances: 256,
            alpha: 0.05,
            clusters: 2,
            cluster_method: ClusterMethod::KMeans,
            seed: 0,
            min_frac: None,
            max_depth: None,
            leaf_fit: FitControl::default(),
            gate_ridge: 1e-3,
            ci: RcotConfig::default(),
        }
    }
}

impl LearnParams {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::InvalidParams(m));
        if self.clusters < 2 {
            return bad(format!("cluster count must be at least 2, got {}", self.clusters));
        }
        if self.min_instances < 2 * self.clusters {
            return bad(format!(
                "min_instances {} must be at least twice the cluster count {}",
                self.min_instances, self.clusters
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if let Some(f) = self.min_frac {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("min_frac must lie in (0, 1), got {f}"));
            }
        }
        if !(self.gate_ridge >= 0.0) {
            return bad("gate ridge must be nonnegative".into());
        }
        self.leaf_fit.validate().map_err(|e| LearnError::InvalidParams(format!("{e}")))?;
        self.ci.validate().map_err(|e| LearnError::InvalidParams(format!("{e}")))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("invalid learning parameters: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Data(String),
    #[error("leaf fit at {path}: {source}")]
    Leaf { path: String, source: LeafError },
    #[error("independence test at {path}: {source}")]
    Ci { path: String, source: CiError },
    #[error("assembled circuit rejected: {0}")]
    Circuit(CircuitError),
}

/// Hard cluster labels `0..k`, every cluster non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    /// Relabels to `0..k` in order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let labels = raw
            .iter()
            .map(|&l| match map.iter().find(|(from, _)| *from == l) {
                Some(&(_, to)) => to,
                None => {
                    map.push((l, map.len()));
                    map.len() - 1
                }
            })
            .collect();
        ClusterAssignment { labels, k: map.len() }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&r| self.labels[r] == cluster).collect()
    }
}

/// Columns with nonzero variance, standardized; row-major output.
fn standardized_columns(x: &[f64], n: usize, dim: usize) -> (Vec<f64>, usize) {
    let mut keep = Vec::new();
    for c in 0..dim {
        let mean = (0..n).map(|r| x[r * dim + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x[r * dim + c] - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 1e-24 {
            keep.push((c, mean, sqrt(var)));
        }
    }
    let w = keep.len();
    let mut out = Vec::with_capacity(n * w);
    for r in 0..n {
        for &(c, mean, sd) in &keep {
            out.push((x[r * dim + c] - mean) / sd);
        }
    }
    (out, w)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Lloyd's algorithm on standardized columns with farthest-first seeding.
fn kmeans(z: &[f64], n: usize, w: usize, k: usize, seed: u64) -> Vec<usize> {
    if w == 0 || n == 0 {
        return vec![0; n];
    }
    let row = |r: usize| &z[r * w..(r + 1) * w];
    let mut r = rng::seeded(seed);
    let mut centers: Vec<Vec<f64>> = vec![row(uniform_index(&mut r, n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let (far, &d) = nearest
            .iter()
            .enumerate()
            .fold((0, &-1.0), |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc });
        if d <= 0.0 {
            break;
        }
        centers.push(row(far).to_vec());
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(row(i), &centers[centers.len() - 1]));
        }
    }
    let kk = centers.len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row(i), center);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; w]; kk];
        let mut counts = vec![0usize; kk];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l].iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    labels
}

/// Splits `members` by a random hyperplane through the median projection.
fn hyperplane_split(z: &[f64], w: usize, members: &[usize], r: &mut rng::Rng) -> Option<(Vec<usize>, Vec<usize>)> {
    let dir: Vec<f64> = (0..w).map(|_| StandardNormal.sample(r)).collect();
    let proj: Vec<f64> = members.iter().map(|&i| math::dot(&z[i * w..(i + 1) * w], &dir)).collect();
    let mut sorted = proj.clone();
    let med = math::median(&mut sorted)?;
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for (&i, &p) in members.iter().zip(&proj) {
        if p > med {
            hi.push(i);
        } else {
            lo.push(i);
        }
    }
    (!lo.is_empty() && !hi.is_empty()).then_some((lo, hi))
}

fn random_projection(z: &[f64], n: usize, w: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut labels = vec![0; n];
    if w == 0 {
        return labels;
    }
    let mut r = rng::seeded(seed);
    let mut groups: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut stuck = vec![false];
    while groups.len() < k {
        let Some(g) = (0..groups.len()).filter(|&g| !stuck[g]).max_by_key(|&g| (groups[g].len(), usize::MAX - g)) else {
            break;
        };
        match hyperplane_split(z, w, &groups[g], &mut r) {
            Some((lo, hi)) => {
                groups[g] = lo;
                groups.push(hi);
                stuck.push(false);
            }
            None => stuck[g] = true,
        }
    }
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            labels[i] = g;
        }
    }
    labels
}

/// Clusters `n` rows of `dim` features (row-major) into at most `k`
/// non-empty groups. Constant columns are ignored; rows that are all
/// identical give a single cluster.
pub fn split_instances(x: &[f64], dim: usize, k: usize, method: ClusterMethod, seed: u64) -> ClusterAssignment {
    let n = x.len().checked_div(dim).unwrap_or(0);
    if n == 0 {
        return ClusterAssignment { labels: vec![], k: 0 };
    }
    let (z, w) = standardized_columns(x, n, dim);
    let raw = match method {
        ClusterMethod::KMeans => kmeans(&z, n, w, k, seed),
        ClusterMethod::RandomSplit => random_projection(&z, n, w, k, seed),
    };
    ClusterAssignment::from_labels(&raw)
}

/// Diagnostics of a gating regression.
#[derive(Debug, Clone, PartialEq)]
pub struct GateFit {
    pub gate: GatingFunction,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Multinomial logistic regression of the cluster labels on `x`, with
/// class 0 as the reference (its row stays zero). Minimizes
/// `(-loglik + ridge/2 |beta|^2) / n` by L-BFGS to gradient norm `1e-6` or
/// 500 iterations. For two clusters this is the Bernoulli GLM of the
/// indicator `z == 1` with the same ridge.
pub fn fit_gating(x: &[f64], dim: usize, z: &ClusterAssignment, ridge: f64) -> Result<GateFit, LearnError> {
    let n = z.labels.len();
    let k = z.k;
    if k < 2 {
        return Err(LearnError::Data("gating fit needs at least two clusters".into()));
    }
    if x.len() != n * dim {
        return Err(LearnError::Data(format!("gating fit: {} values for {n} rows of {dim}", x.len())));
    }
    let p = dim + 1;
    let counts = z.counts();
    let mut start = vec![0.0; (k - 1) * p];
    for c in 1..k {
        start[(c - 1) * p + dim] = log(counts[c] as f64 / counts[0] as f64);
    }
    let inv_n = 1.0 / n as f64;
    let objective = |beta: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().zip(beta).for_each(|(g, b)| *g = ridge * inv_n * b);
        let mut loss = 0.5 * ridge * inv_n * math::dot(beta, beta);
        let mut logits = vec![0.0; k];
        for r in 0..n {
            let xr = &x[r * dim..(r + 1) * dim];
            for c in 1..k {
                let b = &beta[(c - 1) * p..c * p];
                logits[c] = math::dot(&b[..dim], xr) + b[dim];
            }
            let lse = math::log_sum_exp(&logits);
            loss -= inv_n * (logits[z.labels[r]] - lse);
            for c in 1..k {
                let resid = math::exp(logits[c] - lse) - if z.labels[r] == c { 1.0 } else { 0.0 };
                let g = &mut grad[(c - 1) * p..c * p];
                for (gj, xj) in g[..dim].iter_mut().zip(xr) {
                    *gj += inv_n * resid * xj;
                }
                g[dim] += inv_n * resid;
            }
        }
        loss
    };
    let res = lbfgs::minimize(objective, start, &LbfgsControl::default());
    if res.x.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::Data("gating fit diverged".into()));
    }
    let mut coeffs = vec![0.0; p];
    coeffs.extend_from_slice(&res.x);
    Ok(GateFit {
        gate: GatingFunction::Softmax { k, coeffs },
        iterations: res.iterations,
        grad_norm: res.grad_norm,
        converged: res.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearnStats {
    /// Total pairwise independence tests run.
    pub ci_tests: usize,
    /// Tests per label-split call, in call order.
    pub tests_per_split: Vec<usize>,
    pub product_splits: usize,
    pub gating_splits: usize,
    pub factorized: usize,
    /// Gating splits where clustering made no progress and a random
    /// balanced split was used instead.
    pub forced_splits: usize,
    /// Gating splits that clustered on the targets because the features
    /// were constant on the node's rows.
    pub target_clusterings: usize,
    pub leaves: usize,
    pub max_depth_reached: usize,
}

#[derive(Debug, Clone)]
pub struct Learned {
    pub circuit: Circuit,
    pub stats: LearnStats,
}

struct Learner<'a> {
    data: &'a Dataset,
    params: &'a LearnParams,
    exec: &'a dyn PairExecutor,
    nodes: Vec<Node>,
    stats: LearnStats,
    calls: u64,
}

impl Learner<'_> {
    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn x_rows(&self, rows: &[usize]) -> Vec<f64> {
        let mut x = Vec::with_capacity(rows.len() * self.data.num_x());
        for &r in rows {
            x.extend_from_slice(self.data.x_row(r));
        }
        x
    }

    fn leaf(&mut self, rows: &[usize], var: usize, path: &str) -> Result<NodeId, LearnError> {
        let family = Family::for_column(self.data.y_type(var));
        let y: Vec<f64> = rows.iter().map(|&r| self.data.y(r, var)).collect();
        let leaf = fit_irwls(family, &y, &self.x_rows(rows), self.data.num_x(), &self.params.leaf_fit)
            .map_err(|source| LearnError::Leaf { path: format!("{path}/leaf(y{var})"), source })?;
        self.stats.leaves += 1;
        Ok(self.push(Node::leaf(var, leaf)))
    }

    fn factorized(&mut self, rows: &[usize], vars: &[usize], path: &str) -> Result<NodeId, LearnError> {
        self.stats.factorized += 1;
        let children = vars
            .iter()
            .map(|&v| self.leaf(rows, v, path))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.push(Node::product(Scope::new(vars.iter().copied()), children)))
    }

    fn build(&mut self, rows: &[usize], vars: &[usize], depth: usize, path: &str) -> Result<NodeId, LearnError> {
        self.stats.max_depth_reached = self.stats.max_depth_reached.max(depth);
        let call = self.calls;
        self.calls += 1;
        let p = self.params;
        if vars.len() == 1 {
            return self.leaf(rows, vars[0], path);
        }
        let total = self.data.n_rows() as f64;
        let small = rows.len() < p.min_instances
            || p.min_frac.is_some_and(|f| rows.len() as f64 <= f * total)
            || p.max_depth.is_some_and(|d| depth >= d);
        if small {
            return self.factorized(rows, vars, path);
        }
        let seed = rng::derive_seed(p.seed, &[call]);

        let columns: Vec<Vec<f64>> = vars.iter().map(|&v| rows.iter().map(|&r| self.data.y(r, v)).collect()).collect();
        let x = self.x_rows(rows);
        let split = split_columns(&columns, vars, &x, self.data.num_x(), p.alpha, seed, &p.ci, self.exec)
            .map_err(|source| LearnError::Ci { path: path.into(), source })?;
        self.stats.ci_tests += split.tests;
        self.stats.tests_per_split.push(split.tests);
        if split.blocks.len() > 1 {
            self.stats.product_splits += 1;
            let mut children = Vec::with_capacity(split.blocks.len());
            for (b, block) in split.blocks.iter().enumerate() {
                let sub: Vec<usize> = block.iter().map(|&k| vars[k]).collect();
                children.push(self.build(rows, &sub, depth + 1, &format!("{path}/product[{b}]"))?);
            }
            return Ok(self.push(Node::product(Scope::new(vars.iter().copied()), children)));
        }

        let assignment = self.cluster(rows, vars, &x, seed);
        self.stats.gating_splits += 1;
        let gate = if self.data.num_x() == 0 {
            let n = rows.len() as f64;
            GatingFunction::Constant(assignment.counts().iter().map(|&c| c as f64 / n).collect())
        } else {
            fit_gating(&x, self.data.num_x(), &assignment, p.gate_ridge)?.gate
        };
        let mut children = Vec::with_capacity(assignment.k);
        for c in 0..assignment.k {
            let sub: Vec<usize> = assignment.members(c).into_iter().map(|i| rows[i]).collect();
            children.push(self.build(&sub, vars, depth + 1, &format!("{path}/gating[{c}]"))?);
        }
        Ok(self.push(Node::gating(Scope::new(vars.iter().copied()), children, gate)))
    }

    fn cluster(&mut self, rows: &[usize], vars: &[usize], x: &[f64], seed: u64) -> ClusterAssignment {
        let p = self.params;
        let n = rows.len();
        let dim = self.data.num_x();
        let mut a = split_instances(x, dim, p.clusters, p.cluster_method, seed);
        if a.k <= 1 {
            // No usable feature variation: cluster on the node's targets.
            let data = self.data;
            let y: Vec<f64> = rows.iter().flat_map(|&r| vars.iter().map(move |&v| data.y(r, v))).collect();
            let by_y = split_instances(&y, vars.len(), p.clusters, p.cluster_method, seed);
            if by_y.k > 1 {
                self.stats.target_clusterings += 1;
                a = by_y;
            }
        }
        let a = merge_small_clusters(a, 2);
        if a.k > 1 {
            return a;
        }
        self.stats.forced_splits += 1;
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng::stream(seed, &[1]));
        let mut labels = vec![0; n];
        for &i in &order[n.div_ceil(2)..] {
            labels[i] = 1;
        }
        ClusterAssignment { labels, k: 2 }
    }
}

/// Moves rows of clusters smaller than `min_size` into the largest cluster.
fn merge_small_clusters(a: ClusterAssignment, min_size: usize) -> ClusterAssignment {
    let counts = a.counts();
    if counts.iter().all(|&c| c >= min_size) {
        return a;
    }
    let largest = (0..a.k).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap_or(0);
    let raw: Vec<usize> = a.labels.iter().map(|&l| if counts[l] < min_size { largest } else { l }).collect();
    ClusterAssignment::from_labels(&raw)
}

/// Learns a circuit for `P(Y | X)` from `data`.
pub fn learn_cspn(data: &Dataset, params: &LearnParams) -> Result<Learned, LearnError> {
    learn_cspn_with(data, params, &SerialPairs)
}

/// As [`learn_cspn`], running the pairwise tests of each split through
/// `exec`. The result does not depend on the executor.
pub fn learn_cspn_with(data: &Dataset, params: &LearnParams, exec: &dyn PairExecutor) -> Result<Learned, LearnError> {
    params.validate()?;
    if data.n_rows() == 0 {
        return Err(LearnError::Data("empty dataset".into()));
    }
    let mut l = Learner { data, params, exec, nodes: Vec::new(), stats: LearnStats::default(), calls: 0 };
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let vars: Vec<usize> = (0..data.num_y()).collect();
    let root = l.build(&rows, &vars, 0, "root")?;
    let circuit = Circuit::new(data.num_y(), data.num_x(), l.nodes, root).map_err(LearnError::Circuit)?;
    Ok(Learned { circuit, stats: l.stats })
}

/// Product of independently fitted GLM leaves, one per target.
pub fn factorized_baseline(data: &Dataset, ctrl: &FitControl) -> Result<Circuit, LearnError> {
    let params = LearnParams { leaf_fit: *ctrl, ..LearnParams::default() };
    let mut l = Learner { data, params: &params, exec: &SerialPairs, nodes: Vec::new(), stats: LearnStats::default(), calls: 0 };
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let vars: Vec<usize> = (0..data.num_y()).collect();
    let root = if vars.len() == 1 { l.leaf(&rows, 0, "root")? } else { l.factorized(&rows, &vars, "root")? };
    Circuit::new(data.num_y(), data.num_x(), l.nodes, root).map_err(LearnError::Circuit)
}

/// Mean conditional log-likelihood of a circuit over a dataset.
pub fn mean_cll(circuit: &Circuit, data: &Dataset) -> Result<f64, CircuitError> {
    let mut s = 0.0;
    for r in 0..data.n_rows() {
        s += circuit.log_density_of(data.y_row(r), data.x_row(r))?;
    }
    Ok(s / data.n_rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::NodeKind;
    use crate::data::synthetic::{make_synthetic, parse_partition, Generator, SyntheticSpec};
    use crate::data::ColumnType;
    use rand::Rng as _;

    fn blobs(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut x = Vec::new();
        let mut z = Vec::new();
        for _ in 0..n {
            let c = r.random::<f64>() < 0.5;
            let m = if c { 4.0 } else { -4.0 };
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            x.extend([m + a, m + b]);
            z.push(c as usize);
        }
        (x, z)
    }

    fn same_up_to_relabel(a: &[usize], b: &[usize]) -> bool {
        a.iter().zip(b).all(|(x, y)| x == y) || a.iter().zip(b).all(|(x, y)| *x == 1 - *y)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        for seed in 0..10 {
            let (x, z) = blobs(300, seed);
            let a = split_instances(&x, 2, 2, ClusterMethod::KMeans, seed);
            assert_eq!(a.k, 2);
            assert!(same_up_to_relabel(&a.labels, &z), "seed {seed}");
        }
    }

    #[test]
    fn identical_rows_give_one_cluster() {
        let x = vec![1.5; 40];
        for m in [ClusterMethod::KMeans, ClusterMethod::RandomSplit] {
            assert_eq!(split_instances(&x, 2, 2, m, 0).k, 1);
        }
    }

    #[test]
    fn random_split_is_seeded_and_balanced() {
        let (x, _) = blobs(101, 3);
        let a = split_instances(&x, 2, 2, ClusterMethod::RandomSplit, 9);
        assert_eq!(a, split_instances(&x, 2, 2, ClusterMethod::RandomSplit, 9));
        let c = a.counts();
        assert_eq!(c.iter().sum::<usize>(), 101);
        assert!(c.iter().all(|&v| v == 50 || v == 51), "{c:?}");
        let four = split_instances(&x, 2, 4, ClusterMethod::RandomSplit, 9);
        assert_eq!(four.k, 4);
    }

    #[test]
    fn gate_separates_separable_clusters() {
        let (x, z) = blobs(400, 1);
        let a = ClusterAssignment { labels: z.clone(), k: 2 };
        let fit = fit_gating(&x, 2, &a, 1e-3).unwrap();
        let hits = (0..400)
            .filter(|&r| {
                let w = fit.gate.weights(&x[2 * r..2 * r + 2]);
                (w[1] > w[0]) as usize == z[r]
            })
            .count();
        assert!(hits as f64 >= 0.99 * 400.0);
    }

    #[test]
    fn uninformative_features_give_proportions() {
        let mut r = rng::seeded(2);
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let labels: Vec<usize> = (0..n).map(|_| (r.random::<f64>() < 0.3) as usize).collect();
        let a = ClusterAssignment { labels, k: 2 };
        let share = a.counts()[1] as f64 / n as f64;
        let fit = fit_gating(&x, 1, &a, 1e-3).unwrap();
        for v in [-2.0, 0.0, 2.0] {
            assert!((fit.gate.weights(&[v])[1] - share).abs() < 0.05);
        }
    }

    #[test]
    fn two_cluster_gate_matches_bernoulli_glm() {
        let mut r = rng::seeded(5);
        let n = 800;
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            let p = math::sigmoid(0.8 * a - 1.2 * b + 0.3);
            labels.push((r.random::<f64>() < p) as usize);
            x.extend([a, b]);
        }
        let ridge = 1e-3;
        let fit = fit_gating(&x, 2, &ClusterAssignment { labels: labels.clone(), k: 2 }, ridge).unwrap();
        assert!(fit.converged, "{fit:?}");
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let glm = fit_irwls(Family::Bernoulli, &y, &x, 2, &FitControl { ridge, tol: 1e-14, max_iters: 100 }).unwrap();
        let GatingFunction::Softmax { coeffs, .. } = fit.gate else { panic!() };
        for (a, b) in coeffs[3..].iter().zip(glm.coeffs()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    fn params(min_instances: usize, seed: u64) -> LearnParams {
        LearnParams { min_instances, seed, ..LearnParams::default() }
    }

    #[test]
    fn single_target_is_a_leaf() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::PoissonGlm { coeffs: vec![0.5, 0.1] }, n: 100 }, 1).unwrap();
        let l = learn_cspn(&ds, &params(16, 0)).unwrap();
        assert_eq!(l.circuit.nodes().len(), 1);
        assert!(matches!(l.circuit.node(0).kind, NodeKind::Leaf(_)));
    }

    #[test]
    fn few_rows_factorize() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::BlockFactorized { group_sizes: vec![3] }, n: 50 }, 1).unwrap();
        let l = learn_cspn(&ds, &params(256, 0)).unwrap();
        let root = l.circuit.node(l.circuit.root());
        assert!(matches!(&root.kind, NodeKind::Product(c) if c.len() == 3));
        assert_eq!(l.stats.ci_tests, 0);
    }

    #[test]
    fn recovers_block_partition() {
        let mut ok = 0;
        for seed in 0..5 {
            let ds = make_synthetic(&SyntheticSpec { generator: Generator::BlockFactorized { group_sizes: vec![2, 2] }, n: 1000 }, seed).unwrap();
            let l = learn_cspn(&ds, &params(256, seed)).unwrap();
            if l.circuit.summary().root_partition == parse_partition(&ds.metadata["partition"]) {
                ok += 1;
            }
        }
        assert!(ok >= 4, "{ok}/5");
    }

    #[test]
    fn learned_circuits_are_valid_and_beat_factorized() {
        for seed in 0..10 {
            let gen = match seed % 3 {
                0 => Generator::TwoBlobGating,
                1 => Generator::BlockFactorized { group_sizes: vec![1, 2] },
                _ => Generator::DependentPair,
            };
            let ds = make_synthetic(&SyntheticSpec { generator: gen, n: 600 }, seed).unwrap();
            let l = learn_cspn(&ds, &params(100, seed)).unwrap();
            assert!(l.circuit.validate().is_valid());
            let base = factorized_baseline(&ds, &FitControl::default()).unwrap();
            let learned = mean_cll(&l.circuit, &ds).unwrap();
            let factorized = mean_cll(&base, &ds).unwrap();
            assert!(learned >= factorized - 1e-9, "seed {seed}: {learned} < {factorized}");
        }
    }

    #[test]
    fn gating_data_produces_gating_nodes() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::TwoBlobGating, n: 1000 }, 4).unwrap();
        let l = learn_cspn(&ds, &params(200, 4)).unwrap();
        assert!(l.stats.gating_splits >= 1);
        assert_eq!(l.stats.ci_tests, l.stats.tests_per_split.iter().sum::<usize>());
    }

    #[test]
    fn no_features_clusters_on_targets() {
        let mut r = rng::seeded(3);
        let mut y = Vec::new();
        for _ in 0..400 {
            let b = (r.random::<f64>() < 0.5) as u8 as f64;
            y.extend([b, b]);
        }
        let ds = Dataset::from_blocks(&[ColumnType::Binary; 2], y, &[], vec![]).unwrap();
        let l = learn_cspn(&ds, &params(64, 0)).unwrap();
        assert!(l.circuit.validate().is_valid());
        assert!(l.stats.gating_splits >= 1);
        assert!(l.stats.target_clusterings >= 1);
    }

    #[test]
    fn learning_is_deterministic() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::TwoBlobGating, n: 500 }, 8).unwrap();
        let a = learn_cspn(&ds, &params(100, 3)).unwrap();
        let b = learn_cspn(&ds, &params(100, 3)).unwrap();
        assert_eq!(a.circuit, b.circuit);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::CiPair, n: 20 }, 1).unwrap();
        assert!(learn_cspn(&ds, &LearnParams { min_instances: 3, ..LearnParams::default() }).is_err());
        assert!(learn_cspn(&ds, &LearnParams { alpha: 1.0, ..LearnParams::default() }).is_err());
        assert!(learn_cspn(&ds, &LearnParams { clusters: 1, ..LearnParams::default() }).is_err());
    }

    #[test]
    fn depth_limit_stops_recursion() {
        let ds = make_synthetic(&SyntheticSpec { generator: Generator::TwoBlobGating, n: 800 }, 2).unwrap();
        let l = learn_cspn(&ds, &LearnParams { max_depth: Some(1), ..params(16, 2) }).unwrap();
        assert!(l.stats.max_depth_reached <= 2);
    }
}
