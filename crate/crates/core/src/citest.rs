//! Randomized conditional-independence testing (RCoT) and the label
//! partitioning step of structure learning.
//!
//! Each variable block is mapped through random Fourier features of an RBF
//! kernel. The test statistic is `n` times the squared Frobenius norm of
//! the empirical partial cross-covariance of the two target feature blocks
//! given the conditioning block. Under the null it is asymptotically a
//! weighted sum of chi-square(1) variables whose weights are the
//! eigenvalues of the covariance of the residual feature products.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{shuffle, Dataset};
use crate::math::{self, chi2_sf, cos, gamma_sf, sqrt};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid test configuration: {0}")]
    Config(String),
}

/// Random Fourier feature map approximating `exp(-|a - b|^2 / (2 bw^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    bandwidth: f64,
    /// `F x d`, rows drawn from `N(0, I / bw^2)`.
    frequencies: DMatrix<f64>,
    phases: Vec<f64>,
}

impl RffMap {
    pub fn new(bandwidth: f64, frequencies: DMatrix<f64>, phases: Vec<f64>) -> Result<Self, CiError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(CiError::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if frequencies.nrows() == 0 || frequencies.nrows() != phases.len() {
            return Err(CiError::Config("need F >= 1 frequencies with one phase each".into()));
        }
        Ok(RffMap { bandwidth, frequencies, phases })
    }

    /// Draws `features` frequencies and phases for a given bandwidth.
    pub fn draw(bandwidth: f64, dim: usize, features: usize, rng: &mut Rng) -> Result<Self, CiError> {
        let mut freq = DMatrix::zeros(features, dim);
        for v in freq.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = z / bandwidth;
        }
        let phases = (0..features).map(|_| rng.random::<f64>() * 2.0 * core::f64::consts::PI).collect();
        RffMap::new(bandwidth, freq, phases)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn num_features(&self) -> usize {
        self.phases.len()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    /// Uncentered features `sqrt(2/F) cos(w . x + b)`, one row per point.
    pub fn raw_features(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>, CiError> {
        if points.ncols() != self.dim() {
            return Err(CiError::Dimension(format!("map expects {} columns, got {}", self.dim(), points.ncols())));
        }
        let f = self.num_features();
        let scale = sqrt(2.0 / f as f64);
        let proj = points * self.frequencies.transpose();
        Ok(DMatrix::from_fn(points.nrows(), f, |r, c| scale * cos(proj[(r, c)] + self.phases[c])))
    }
}

/// Column-centered random Fourier features.
pub fn rff_features(points: &DMatrix<f64>, map: &RffMap) -> Result<DMatrix<f64>, CiError> {
    let mut z = map.raw_features(points)?;
    for mut col in z.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    Ok(z)
}

/// Median pairwise Euclidean distance among the first `max_points` rows.
/// Falls back to the median of the nonzero distances when more than half
/// are zero (discrete data), and to 1 when all points coincide.
pub fn median_bandwidth(points: &DMatrix<f64>, max_points: usize) -> f64 {
    let m = points.nrows().min(max_points);
    let mut d = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let mut s = 0.0;
            for c in 0..points.ncols() {
                let t = points[(i, c)] - points[(j, c)];
                s += t * t;
            }
            d.push(sqrt(s));
        }
    }
    match math::median(&mut d) {
        Some(med) if med > 0.0 => med,
        _ => {
            let mut nz: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
            math::median(&mut nz).unwrap_or(1.0)
        }
    }
}

/// Standardizes columns with the `n - 1` divisor and drops constant ones.
fn standardize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut keep = Vec::new();
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
        if var > 0.0 && var.is_finite() {
            keep.push((c, mean, sqrt(var)));
        }
    }
    DMatrix::from_fn(n, keep.len(), |r, k| {
        let (c, mean, sd) = keep[k];
        (m[(r, c)] - mean) / sd
    })
}

/// Standardizes columns, zeroing constant ones so the width is kept.
fn standardize_keep(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / (n.max(2) - 1) as f64;
        if var > 1e-300 {
            col /= sqrt(var);
        } else {
            col.fill(0.0);
        }
    }
}

/// Cross-covariance of two column-centered blocks (`n - 1` divisor).
fn cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    a.tr_mul(b) / (n.max(2) - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullMethod {
    /// Lindsay-Pilla-Basak four-point moment matching.
    Lpb,
    /// Hall-Buckley-Eagleson three-cumulant gamma matching.
    Hbe,
    Permutation,
    /// One of the targets is constant: independence holds trivially.
    Degenerate,
}

impl NullMethod {
    pub fn name(self) -> &'static str {
        match self {
            NullMethod::Lpb => "lpb",
            NullMethod::Hbe => "hbe",
            NullMethod::Permutation => "permutation",
            NullMethod::Degenerate => "degenerate",
        }
    }
}

impl fmt::Display for NullMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which null approximation to use. `Auto` walks LPB, then HBE, and uses
/// permutations below `min_asymptotic_n` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullChoice {
    Auto,
    Lpb,
    Hbe,
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcotConfig {
    pub y_features: usize,
    pub x_features: usize,
    pub bandwidth_points: usize,
    pub permutations: usize,
    pub min_asymptotic_n: usize,
    /// Multiplies `trace(C_xx)` to form the ridge added before inversion.
    pub ridge: f64,
    pub null: NullChoice,
}

impl Default for RcotConfig {
    fn default() -> Self {
        RcotConfig {
            y_features: 5,
            x_features: 25,
            bandwidth_points: 500,
            permutations: 200,
            min_asymptotic_n: 20,
            ridge: 1e-10,
            null: NullChoice::Auto,
        }
    }
}

impl RcotConfig {
    pub fn validate(&self) -> Result<(), CiError> {
        if self.y_features == 0 || self.x_features == 0 {
            return Err(CiError::Config("feature counts must be at least 1".into()));
        }
        if self.permutations == 0 {
            return Err(CiError::Config("permutations must be at least 1".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(CiError::Config("ridge must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: NullMethod,
    /// Positive spectrum of the null covariance (empty for permutation or
    /// degenerate results).
    pub eigenvalues: Vec<f64>,
}

impl CiTestResult {
    /// Evidence of conditional dependence at level `alpha`.
    pub fn dependent(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Tests `yi ⊥ yj | x`. `x` is row-major with `dim` columns; `dim = 0`
/// gives an unconditional test.
pub fn rcot(yi: &[f64], yj: &[f64], x: &[f64], dim: usize, seed: u64, cfg: &RcotConfig) -> Result<CiTestResult, CiError> {
    cfg.validate()?;
    let n = yi.len();
    if yj.len() != n || x.len() != n * dim {
        return Err(CiError::Dimension(format!(
            "yi has {n} rows, yj {} rows, x {} values for {dim} columns",
            yj.len(),
            x.len()
        )));
    }
    if n < 2 {
        return Err(CiError::Dimension("need at least 2 rows".into()));
    }
    let a = standardize(&column(yi));
    let b = standardize(&column(yj));
    if a.ncols() == 0 || b.ncols() == 0 {
        return Ok(CiTestResult { statistic: 0.0, p_value: 1.0, method: NullMethod::Degenerate, eigenvalues: vec![] });
    }
    let z = standardize(&DMatrix::from_row_slice(n, dim, x));
    let mut r = rng::seeded(seed);

    let feats = |m: &DMatrix<f64>, f: usize, r: &mut Rng| -> Result<DMatrix<f64>, CiError> {
        let bw = median_bandwidth(m, cfg.bandwidth_points);
        let map = RffMap::draw(bw, m.ncols(), f, r)?;
        let mut out = rff_features(m, &map)?;
        standardize_keep(&mut out);
        Ok(out)
    };
    // Draw order fixed: conditioning block, then yi, then yj.
    let fz = if z.ncols() > 0 { Some(feats(&z, cfg.x_features, &mut r)?) } else { None };
    let fa = feats(&a, cfg.y_features, &mut r)?;
    let fb = feats(&b, cfg.y_features, &mut r)?;

    let (res_a, res_b) = match &fz {
        None => (fa, fb),
        Some(fz) => {
            let proj = ridge_projector(fz, cfg.ridge)?;
            let res_a = &fa - fz * proj.solve(&fa)?;
            let res_b = &fb - fz * proj.solve(&fb)?;
            (res_a, res_b)
        }
    };
    let statistic = n as f64 * cross_cov(&res_a, &res_b).norm_squared();

    let method = match cfg.null {
        NullChoice::Auto if n < cfg.min_asymptotic_n => NullChoice::Permutation,
        other => other,
    };
    if method == NullChoice::Permutation {
        let p = permutation_p_value(&res_a, &res_b, statistic, cfg.permutations, &mut r);
        return Ok(CiTestResult { statistic, p_value: p, method: NullMethod::Permutation, eigenvalues: vec![] });
    }

    let eigenvalues = null_spectrum(&res_a, &res_b);
    let (p, used) = match method {
        NullChoice::Hbe => (hbe_p_value(&eigenvalues, statistic), NullMethod::Hbe),
        _ => match lpb4_p_value(&eigenvalues, statistic) {
            Some(p) => (p, NullMethod::Lpb),
            None => (hbe_p_value(&eigenvalues, statistic), NullMethod::Hbe),
        },
    };
    Ok(CiTestResult { statistic, p_value: p.clamp(0.0, 1.0), method: used, eigenvalues })
}

/// Solves `(C_zz + ridge I) beta = C_zy` without forming `C_zz`: a QR
/// factorization of `fz` stacked on `sqrt((n - 1) ridge) I` is the same
/// ridge solution at half the condition number.
struct RidgeProjector {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    rows: usize,
}

fn ridge_projector(fz: &DMatrix<f64>, ridge_scale: f64) -> Result<RidgeProjector, CiError> {
    let (n, k) = fz.shape();
    let trace = fz.norm_squared() / (n.max(2) - 1) as f64;
    let lambda = ridge_scale * trace.max(1.0);
    let mut stacked = DMatrix::zeros(n + k, k);
    stacked.rows_mut(0, n).copy_from(fz);
    let s = sqrt(lambda * (n.max(2) - 1) as f64);
    for i in 0..k {
        stacked[(n + i, i)] = s;
    }
    let qr = stacked.qr();
    let r = qr.r();
    if (0..k).any(|i| r[(i, i)] == 0.0 || !r[(i, i)].is_finite()) {
        return Err(CiError::Numeric("regularized conditioning covariance is singular".into()));
    }
    Ok(RidgeProjector { q: qr.q(), r, rows: n })
}

impl RidgeProjector {
    fn solve(&self, target: &DMatrix<f64>) -> Result<DMatrix<f64>, CiError> {
        let qt_b = self.q.rows(0, self.rows).tr_mul(target);
        self.r
            .solve_upper_triangular(&qt_b)
            .ok_or_else(|| CiError::Numeric("triangular solve failed".into()))
    }
}

/// Positive eigenvalues of the covariance of all pairwise residual products.
fn null_spectrum(res_a: &DMatrix<f64>, res_b: &DMatrix<f64>) -> Vec<f64> {
    let n = res_a.nrows();
    let (fa, fb) = (res_a.ncols(), res_b.ncols());
    let prods = DMatrix::from_fn(n, fa * fb, |r, k| res_a[(r, k % fa)] * res_b[(r, k / fa)]);
    let cov = prods.tr_mul(&prods) / n as f64;
    let eig = cov.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().filter(|&v| v > 0.0).collect();
    ev.sort_unstable_by(|a, b| b.total_cmp(a));
    ev
}

fn permutation_p_value(res_a: &DMatrix<f64>, res_b: &DMatrix<f64>, statistic: f64, b: usize, r: &mut Rng) -> f64 {
    let n = res_a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut exceed = 0usize;
    for _ in 0..b {
        shuffle(&mut idx, r);
        let perm = res_a.select_rows(idx.iter());
        let s = n as f64 * cross_cov(&perm, res_b).norm_squared();
        if s >= statistic {
            exceed += 1;
        }
    }
    (1 + exceed) as f64 / (b + 1) as f64
}

/// Raw moments `m_1..m_{2p}` of `sum_k w_k chi2_1` from its cumulants.
fn weighted_chi2_moments(weights: &[f64], count: usize) -> Vec<f64> {
    let mut cumulants = Vec::with_capacity(count);
    let mut fact = 1.0; // (i - 1)!
    for i in 1..=count {
        if i > 1 {
            fact *= (i - 1) as f64;
        }
        let power_sum: f64 = weights.iter().map(|w| libm::pow(*w, i as f64)).sum();
        cumulants.push(libm::pow(2.0, (i - 1) as f64) * fact * power_sum);
    }
    // m_n = k_n + sum_{m=1}^{n-1} C(n-1, m-1) k_m m_{n-m}
    let mut moments = vec![0.0; count];
    for n in 1..=count {
        let mut s = cumulants[n - 1];
        for m in 1..n {
            s += binomial(n - 1, m - 1) * cumulants[m - 1] * moments[n - m - 1];
        }
        moments[n - 1] = s;
    }
    moments
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// The `(N+1) x (N+1)` Hankel matrix of moments rescaled by
/// `prod_{i=1}^{k-1} (1 + i lambda)`.
fn delta_matrix(lambda: f64, moments: &[f64], size: usize) -> DMatrix<f64> {
    let mut scaled = Vec::with_capacity(2 * size + 1);
    scaled.push(1.0);
    let mut denom = 1.0;
    for k in 1..=2 * size {
        if k >= 2 {
            denom *= 1.0 + (k - 1) as f64 * lambda;
        }
        scaled.push(moments[k - 1] / denom);
    }
    DMatrix::from_fn(size + 1, size + 1, |i, j| scaled[i + j])
}

/// Upper-tail probability of `sum_k w_k chi2_1` at `stat` by the
/// Lindsay-Pilla-Basak four-support-point gamma mixture. `None` when the
/// moment system is infeasible.
pub fn lpb4_p_value(weights: &[f64], stat: f64) -> Option<f64> {
    const P: usize = 4;
    if weights.len() < P {
        return None;
    }
    let moments = weighted_chi2_moments(weights, 2 * P);
    let mut lambda = moments[1] / (moments[0] * moments[0]) - 1.0;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return None;
    }
    for size in 2..=P {
        let f = |l: f64| delta_matrix(l, &moments, size).determinant();
        let (mut lo, mut hi) = (0.0, lambda);
        let (flo, fhi) = (f(lo), f(hi));
        if !(flo.is_finite() && fhi.is_finite()) || flo * fhi > 0.0 {
            return None;
        }
        let lo_positive = flo > 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == lo_positive {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 * lambda {
                break;
            }
        }
        lambda = 0.5 * (lo + hi);
    }
    let m = delta_matrix(lambda, &moments, P);
    // Coefficient of mu^i is the signed cofactor of the last row.
    let coeffs: Vec<f64> = (0..=P)
        .map(|i| {
            let minor = m.clone().remove_row(P).remove_column(i);
            let sign = if (P + i).is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * minor.determinant()
        })
        .collect();
    let roots = real_polynomial_roots(&coeffs)?;
    let vdm = DMatrix::from_fn(P, P, |i, j| libm::pow(roots[j], i as f64));
    let rhs = DVector::from_fn(P, |i, _| m[(i, 0)]);
    let pis = vdm.lu().solve(&rhs)?;
    if pis.iter().any(|v| !v.is_finite()) || roots.iter().any(|&r| !(r > 0.0)) {
        return None;
    }
    let shape = 1.0 / lambda;
    let p: f64 = roots.iter().zip(pis.iter()).map(|(&mu, &pi)| pi * gamma_sf(stat, shape, mu * lambda)).sum();
    (p.is_finite() && (-1e-6..=1.0 + 1e-6).contains(&p)).then_some(p.clamp(0.0, 1.0))
}

/// Real roots of `sum_i c_i t^i` via companion-matrix eigenvalues; `None`
/// if any root is materially complex.
fn real_polynomial_roots(c: &[f64]) -> Option<Vec<f64>> {
    let deg = c.len() - 1;
    let lead = c[deg];
    if lead == 0.0 || !lead.is_finite() {
        return None;
    }
    let comp = DMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -c[deg - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    let eig = comp.complex_eigenvalues();
    let mut roots = Vec::with_capacity(deg);
    for z in eig.iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            return None;
        }
        roots.push(z.re);
    }
    roots.sort_unstable_by(|a, b| a.total_cmp(b));
    Some(roots)
}

/// Upper-tail probability by matching the first three cumulants to a
/// shifted, scaled chi-square.
pub fn hbe_p_value(weights: &[f64], stat: f64) -> f64 {
    if weights.is_empty() {
        return if stat > 0.0 { 0.0 } else { 1.0 };
    }
    let k1: f64 = weights.iter().sum();
    let k2: f64 = 2.0 * weights.iter().map(|w| w * w).sum::<f64>();
    let k3: f64 = 8.0 * weights.iter().map(|w| w * w * w).sum::<f64>();
    let nu = 8.0 * k2 * k2 * k2 / (k3 * k3);
    let t = sqrt(2.0 * nu / k2) * (stat - k1) + nu;
    if t <= 0.0 {
        1.0
    } else {
        chi2_sf(t, nu)
    }
}

/// Undirected dependence graph over target indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DependenceGraph {
    pub num_vertices: usize,
    /// `(i, j, result)` with `i < j`, for edges only.
    pub edges: Vec<(usize, usize, CiTestResult)>,
}

impl DependenceGraph {
    /// Connected components, members ascending, blocks ordered by their
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.num_vertices).collect();
        fn find(p: &mut [usize], mut v: usize) -> usize {
            while p[v] != v {
                p[v] = p[p[v]];
                v = p[v];
            }
            v
        }
        for (i, j, _) in &self.edges {
            let (a, b) = (find(&mut parent, *i), find(&mut parent, *j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut block_of = vec![usize::MAX; self.num_vertices];
        for v in 0..self.num_vertices {
            let r = find(&mut parent, v);
            if block_of[r] == usize::MAX {
                block_of[r] = blocks.len();
                blocks.push(Vec::new());
            }
            blocks[block_of[r]].push(v);
        }
        blocks
    }
}

/// Runs the independent pairwise tests of one split. The core crate runs
/// them in order; a threaded runner only has to evaluate `job` for every
/// index and return the results in index order.
pub trait PairExecutor: Sync {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> Result<CiTestResult, CiError> + Sync),
    ) -> Vec<Result<CiTestResult, CiError>>;
}

/// In-order execution on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialPairs;

impl PairExecutor for SerialPairs {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> Result<CiTestResult, CiError> + Sync),
    ) -> Vec<Result<CiTestResult, CiError>> {
        (0..jobs).map(job).collect()
    }
}

/// All target pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn target_pairs(num_y: usize) -> Vec<(usize, usize)> {
    (0..num_y).flat_map(|i| (i + 1..num_y).map(move |j| (i, j))).collect()
}

/// Builds the graph from finished pairwise tests: an edge wherever the
/// pair shows conditional dependence (`p <= alpha`).
pub fn graph_from_tests(num_y: usize, tests: Vec<((usize, usize), CiTestResult)>, alpha: f64) -> DependenceGraph {
    let edges = tests
        .into_iter()
        .filter(|(_, t)| t.dependent(alpha))
        .map(|((i, j), t)| (i, j, t))
        .collect();
    DependenceGraph { num_vertices: num_y, edges }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSplit {
    /// Blocks of column positions (not ids).
    pub blocks: Vec<Vec<usize>>,
    pub graph: DependenceGraph,
    pub tests: usize,
}

/// Label partitioning over explicit target columns. `ids[k]` names column
/// `k` for RNG stream derivation, so the test of variables `(a, b)` draws
/// from the stream keyed by `(seed, a, b)` wherever it runs.
#[allow(clippy::too_many_arguments)]
pub fn split_columns(
    columns: &[Vec<f64>],
    ids: &[usize],
    x: &[f64],
    dim: usize,
    alpha: f64,
    seed: u64,
    cfg: &RcotConfig,
    exec: &dyn PairExecutor,
) -> Result<LabelSplit, CiError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CiError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if ids.len() != columns.len() {
        return Err(CiError::Dimension("one id per column required".into()));
    }
    let pairs = target_pairs(columns.len());
    let job = |k: usize| {
        let (i, j) = pairs[k];
        let stream = rng::derive_seed(seed, &[ids[i] as u64, ids[j] as u64]);
        rcot(&columns[i], &columns[j], x, dim, stream, cfg)
    };
    let results = exec.run(pairs.len(), &job);
    let mut tests = Vec::with_capacity(pairs.len());
    for (pair, r) in pairs.iter().zip(results) {
        tests.push((*pair, r?));
    }
    let graph = graph_from_tests(columns.len(), tests, alpha);
    Ok(LabelSplit { blocks: graph.components(), graph, tests: pairs.len() })
}

/// Partitions the targets of `data` into the connected components of the
/// pairwise conditional dependence graph given all of `X`.
pub fn split_labels(data: &Dataset, alpha: f64, seed: u64, cfg: &RcotConfig) -> Result<LabelSplit, CiError> {
    split_labels_with(data, alpha, seed, cfg, &SerialPairs)
}

pub fn split_labels_with(
    data: &Dataset,
    alpha: f64,
    seed: u64,
    cfg: &RcotConfig,
    exec: &dyn PairExecutor,
) -> Result<LabelSplit, CiError> {
    let columns: Vec<Vec<f64>> = (0..data.num_y()).map(|j| data.y_column(j)).collect();
    let ids: Vec<usize> = (0..data.num_y()).collect();
    split_columns(&columns, &ids, data.x_block(), data.num_x(), alpha, seed, cfg, exec)
}

/// One pairwise test of [`split_labels`] in isolation, on the same stream.
pub fn pair_test(data: &Dataset, i: usize, j: usize, seed: u64, cfg: &RcotConfig) -> Result<CiTestResult, CiError> {
    let stream = rng::derive_seed(seed, &[i as u64, j as u64]);
    rcot(&data.y_column(i), &data.y_column(j), data.x_block(), data.num_x(), stream, cfg)
}
