//! Univariate conditional leaves `P(y | x)` as generalized linear models.
//!
//! Coefficients act on the augmented feature vector `[x; 1]` (intercept
//! last). Categorical leaves carry one such row per class, stored row-major.
//! Every family uses its canonical link, so the score with respect to the
//! linear predictor is `y - mu` (times `1 / sigma^2` for the Gaussian).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::ColumnType;
use crate::linalg::solve_svd;
use crate::math::{self, exp, lgamma, log, log_sigmoid, log_softmax, sigmoid, LN_2PI};

/// Lower bound for the Gaussian variance.
pub const DISPERSION_FLOOR: f64 = 1e-4;

// Poisson rates above this are clamped before sampling.
const MAX_POISSON_RATE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Bernoulli,
    Poisson,
    Gaussian,
    Categorical(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
    Log,
    Identity,
    Softmax,
}

impl Family {
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Bernoulli => Link::Logit,
            Family::Poisson => Link::Log,
            Family::Gaussian => Link::Identity,
            Family::Categorical(_) => Link::Softmax,
        }
    }

    /// Leaf family for a column type.
    pub fn for_column(ty: ColumnType) -> Family {
        match ty {
            ColumnType::Binary => Family::Bernoulli,
            ColumnType::Count => Family::Poisson,
            ColumnType::Continuous => Family::Gaussian,
            ColumnType::Categorical(c) => Family::Categorical(c),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Gaussian => "gaussian",
            Family::Categorical(_) => "categorical",
        }
    }

    fn rows(self) -> usize {
        match self {
            Family::Categorical(c) => c,
            _ => 1,
        }
    }

    pub fn supports(self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.is_finite() && math::floor(y) == y,
            Family::Gaussian => y.is_finite(),
            Family::Categorical(c) => y >= 0.0 && math::floor(y) == y && (y as usize) < c,
        }
    }
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Log => "log",
            Link::Identity => "identity",
            Link::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Categorical(c) => write!(f, "categorical({c})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LeafError {
    #[error("value {y} is outside the support of the {family} family")]
    Domain { family: Family, y: f64 },
    #[error("feature vector has {found} entries, leaf expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid leaf parameters: {0}")]
    InvalidParams(String),
    #[error("{family} fit needs at least {needed} rows, got {found}")]
    InsufficientRows { family: Family, needed: usize, found: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitControl {
    pub max_iters: usize,
    /// Relative change of the penalized deviance that ends the iteration.
    pub tol: f64,
    /// L2 penalty on all coefficients, intercept included.
    pub ridge: f64,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl { max_iters: 50, tol: 1e-8, ridge: 1e-6 }
    }
}

impl FitControl {
    pub fn validate(&self) -> Result<(), LeafError> {
        if self.max_iters == 0 || !(self.tol > 0.0) || !(self.ridge >= 0.0) {
            return Err(LeafError::InvalidParams(format!("bad fit control {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmLeaf {
    family: Family,
    coeffs: Vec<f64>,
    dispersion: f64,
}

impl GlmLeaf {
    pub fn new(family: Family, coeffs: Vec<f64>, dispersion: f64) -> Result<Self, LeafError> {
        let rows = family.rows();
        if let Family::Categorical(c) = family {
            if c < 2 {
                return Err(LeafError::InvalidParams("categorical needs at least 2 classes".into()));
            }
        }
        if coeffs.is_empty() || !coeffs.len().is_multiple_of(rows) {
            return Err(LeafError::InvalidParams(format!(
                "{} coefficients do not fit {rows} row(s)",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(LeafError::InvalidParams("non-finite coefficient".into()));
        }
        if !(dispersion > 0.0) || !dispersion.is_finite() {
            return Err(LeafError::InvalidParams(format!("dispersion {dispersion} must be positive")));
        }
        if family != Family::Gaussian && dispersion != 1.0 {
            return Err(LeafError::InvalidParams(format!("{family} leaves have dispersion 1")));
        }
        Ok(GlmLeaf { family, coeffs, dispersion })
    }

    /// A leaf ignoring its `num_x` features: Bernoulli with probability
    /// `p`, Poisson with rate `p`, Gaussian with mean `p` and unit variance.
    pub fn constant(family: Family, p: f64, num_x: usize) -> Result<Self, LeafError> {
        let intercept = match family {
            Family::Bernoulli => log(p) - log(1.0 - p),
            Family::Poisson => log(p),
            Family::Gaussian => p,
            Family::Categorical(_) => {
                return Err(LeafError::InvalidParams("use GlmLeaf::new for categorical leaves".into()))
            }
        };
        let mut coeffs = vec![0.0; num_x + 1];
        coeffs[num_x] = intercept;
        GlmLeaf::new(family, coeffs, 1.0)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn link(&self) -> Link {
        self.family.canonical_link()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }

    pub fn num_x(&self) -> usize {
        self.coeffs.len() / self.family.rows() - 1
    }

    fn check_x(&self, x: &[f64]) -> Result<(), LeafError> {
        if x.len() != self.num_x() {
            return Err(LeafError::Dimension { expected: self.num_x(), found: x.len() });
        }
        Ok(())
    }

    fn row_eta(&self, row: usize, x: &[f64]) -> f64 {
        let p = x.len() + 1;
        let c = &self.coeffs[row * p..(row + 1) * p];
        math::dot(&c[..x.len()], x) + c[x.len()]
    }

    /// Linear predictor(s): one value, or one per class for categorical.
    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        (0..self.family.rows()).map(|r| self.row_eta(r, x)).collect()
    }

    /// Mean parameter `mu = link^-1(coeffs . [x; 1])`; for categorical
    /// leaves the expected class index.
    pub fn mean(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Bernoulli => sigmoid(self.row_eta(0, x)),
            Family::Poisson => exp(self.row_eta(0, x)),
            Family::Gaussian => self.row_eta(0, x),
            Family::Categorical(_) => {
                let p = math::softmax(&self.linear_predictor(x));
                p.iter().enumerate().map(|(c, pc)| c as f64 * pc).sum()
            }
        }
    }

    pub fn class_probabilities(&self, x: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Categorical(_) => math::softmax(&self.linear_predictor(x)),
            Family::Bernoulli => {
                let p = sigmoid(self.row_eta(0, x));
                vec![1.0 - p, p]
            }
            _ => Vec::new(),
        }
    }

    pub fn log_density(&self, y: f64, x: &[f64]) -> Result<f64, LeafError> {
        self.check_x(x)?;
        if !self.family.supports(y) {
            return Err(LeafError::Domain { family: self.family, y });
        }
        Ok(self.log_density_unchecked(y, x))
    }

    fn log_density_unchecked(&self, y: f64, x: &[f64]) -> f64 {
        match self.family {
            Family::Bernoulli => {
                let eta = self.row_eta(0, x);
                if y == 1.0 {
                    log_sigmoid(eta)
                } else {
                    log_sigmoid(-eta)
                }
            }
            Family::Poisson => {
                let eta = self.row_eta(0, x);
                y * eta - exp(eta) - lgamma(y + 1.0)
            }
            Family::Gaussian => {
                let r = y - self.row_eta(0, x);
                -0.5 * (LN_2PI + log(self.dispersion)) - r * r / (2.0 * self.dispersion)
            }
            Family::Categorical(_) => log_softmax(&self.linear_predictor(x))[y as usize],
        }
    }

    /// Mode of the conditional distribution. Ties go to the lower value:
    /// Bernoulli `p = 0.5` gives 0 and an integer Poisson rate `mu` gives
    /// `mu - 1`.
    pub fn mode(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Bernoulli => {
                if self.row_eta(0, x) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => {
                let mu = exp(self.row_eta(0, x));
                let f = math::floor(mu);
                if f == mu && mu >= 1.0 {
                    mu - 1.0
                } else {
                    f
                }
            }
            Family::Gaussian => self.row_eta(0, x),
            Family::Categorical(_) => {
                let eta = self.linear_predictor(x);
                let mut best = 0;
                for (c, &e) in eta.iter().enumerate() {
                    if e > eta[best] {
                        best = c;
                    }
                }
                best as f64
            }
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        match self.family {
            Family::Bernoulli => {
                let p = sigmoid(self.row_eta(0, x));
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => {
                let mu = exp(self.row_eta(0, x)).min(MAX_POISSON_RATE);
                if mu <= 0.0 {
                    return 0.0;
                }
                Poisson::new(mu).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
            Family::Gaussian => {
                let mu = self.row_eta(0, x);
                Normal::new(mu, math::sqrt(self.dispersion)).map(|d| d.sample(rng)).unwrap_or(mu)
            }
            Family::Categorical(_) => {
                let p = math::softmax(&self.linear_predictor(x));
                let u = rng.random::<f64>();
                let mut acc = 0.0;
                for (c, pc) in p.iter().enumerate() {
                    acc += pc;
                    if u < acc {
                        return c as f64;
                    }
                }
                (p.len() - 1) as f64
            }
        }
    }

    /// Number of trainable parameters: all coefficients, plus the log
    /// variance for Gaussian leaves.
    pub fn num_params(&self) -> usize {
        self.coeffs.len() + usize::from(self.family == Family::Gaussian)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.coeffs.clone();
        if self.family == Family::Gaussian {
            p.push(log(self.dispersion));
        }
        p
    }

    /// Overwrites the parameters; the Gaussian log variance is projected
    /// onto the dispersion floor.
    pub fn set_params(&mut self, p: &[f64]) {
        let n = self.coeffs.len();
        self.coeffs.copy_from_slice(&p[..n]);
        if self.family == Family::Gaussian {
            self.dispersion = exp(p[n]).max(DISPERSION_FLOOR);
        }
    }

    /// Gradient of `log P(y | x)` with respect to [`Self::params`].
    pub fn grad(&self, y: f64, x: &[f64]) -> Result<Vec<f64>, LeafError> {
        self.check_x(x)?;
        if !self.family.supports(y) {
            return Err(LeafError::Domain { family: self.family, y });
        }
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_grad(y, x, 1.0, &mut g);
        Ok(g)
    }

    /// Adds `scale * grad` into `out` without validation.
    pub(crate) fn accumulate_grad(&self, y: f64, x: &[f64], scale: f64, out: &mut [f64]) {
        let p = x.len() + 1;
        let mut add_row = |row: usize, s: f64| {
            let o = &mut out[row * p..(row + 1) * p];
            for (oj, xj) in o.iter_mut().zip(x) {
                *oj += scale * s * xj;
            }
            o[p - 1] += scale * s;
        };
        match self.family {
            Family::Bernoulli => add_row(0, y - sigmoid(self.row_eta(0, x))),
            Family::Poisson => add_row(0, y - exp(self.row_eta(0, x))),
            Family::Gaussian => {
                let r = y - self.row_eta(0, x);
                add_row(0, r / self.dispersion);
                out[p] += scale * (-0.5 + r * r / (2.0 * self.dispersion));
            }
            Family::Categorical(c) => {
                let probs = math::softmax(&self.linear_predictor(x));
                for (k, pk) in probs.iter().enumerate().take(c) {
                    let ind = if y as usize == k { 1.0 } else { 0.0 };
                    add_row(k, ind - pk);
                }
            }
        }
    }
}

/// Result of an IRWLS fit with its per-iteration penalized deviance.
#[derive(Debug, Clone)]
pub struct IrwlsFit {
    pub leaf: GlmLeaf,
    /// Penalized deviance `-2 loglik + ridge * |beta|^2` at the start and
    /// after every accepted iteration.
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits a GLM leaf by iteratively reweighted least squares.
///
/// `x` holds `y.len()` rows of `d` features, row-major. Rows are put in a
/// canonical order first, so the result does not depend on the order in
/// which rows are given.
pub fn fit_irwls(
    family: Family,
    y: &[f64],
    x: &[f64],
    d: usize,
    ctrl: &FitControl,
) -> Result<GlmLeaf, LeafError> {
    fit_irwls_traced(family, y, x, d, ctrl).map(|f| f.leaf)
}

pub fn fit_irwls_traced(
    family: Family,
    y: &[f64],
    x: &[f64],
    d: usize,
    ctrl: &FitControl,
) -> Result<IrwlsFit, LeafError> {
    ctrl.validate()?;
    let n = y.len();
    if x.len() != n * d {
        return Err(LeafError::Dimension { expected: n * d, found: x.len() });
    }
    let needed = if family == Family::Gaussian { 2 } else { 1 };
    if n < needed {
        return Err(LeafError::InsufficientRows { family, needed, found: n });
    }
    if let Some(&bad) = y.iter().find(|&&v| !family.supports(v)) {
        return Err(LeafError::Domain { family, y: bad });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LeafError::Numeric("non-finite feature value".into()));
    }

    // Canonical row order: lexicographic on (y, x).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        y[a].total_cmp(&y[b]).then_with(|| {
            x[a * d..(a + 1) * d]
                .iter()
                .zip(&x[b * d..(b + 1) * d])
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(core::cmp::Ordering::Equal)
        })
    });
    let p = d + 1;
    let mut z = DMatrix::<f64>::zeros(n, p);
    let mut ys = Vec::with_capacity(n);
    for (i, &r) in order.iter().enumerate() {
        for j in 0..d {
            z[(i, j)] = x[r * d + j];
        }
        z[(i, d)] = 1.0;
        ys.push(y[r]);
    }

    match family {
        Family::Gaussian => fit_gaussian(&z, &ys, ctrl),
        Family::Bernoulli | Family::Poisson => fit_single(family, &z, &ys, ctrl),
        Family::Categorical(c) => fit_categorical(c, &z, &ys, ctrl),
    }
}

fn fit_gaussian(z: &DMatrix<f64>, y: &[f64], ctrl: &FitControl) -> Result<IrwlsFit, LeafError> {
    let n = y.len();
    let p = z.ncols();
    let yv = DVector::from_column_slice(y);
    let mut h = z.tr_mul(z);
    for j in 0..p {
        h[(j, j)] += ctrl.ridge;
    }
    let rhs = z.tr_mul(&yv);
    let beta = solve_svd(h, &rhs).ok_or_else(|| LeafError::Numeric("singular gaussian normal equations".into()))?;
    let resid = &yv - z * &beta;
    let rss = resid.norm_squared();
    let var = (rss / n as f64).max(DISPERSION_FLOOR);
    let leaf = GlmLeaf::new(Family::Gaussian, beta.iter().copied().collect(), var)?;
    let dev = rss + ctrl.ridge * beta.norm_squared();
    Ok(IrwlsFit { leaf, deviance_trace: vec![dev], iterations: 1, converged: true })
}

fn single_loglik(family: Family, eta: f64, y: f64) -> f64 {
    match family {
        Family::Bernoulli => {
            if y == 1.0 {
                log_sigmoid(eta)
            } else {
                log_sigmoid(-eta)
            }
        }
        Family::Poisson => y * eta - exp(eta) - lgamma(y + 1.0),
        _ => unreachable!("single-response families only"),
    }
}

fn penalized_deviance(family: Family, z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = z * beta;
    let ll: f64 = eta.iter().zip(y).map(|(&e, &yi)| single_loglik(family, e, yi)).sum();
    -2.0 * ll + ridge * beta.norm_squared()
}

fn accept_step<F: Fn(&DVector<f64>) -> f64>(
    beta: &DVector<f64>,
    mut delta: DVector<f64>,
    dev: f64,
    objective: F,
) -> Option<(DVector<f64>, f64)> {
    for _ in 0..40 {
        let cand = beta + &delta;
        let d = objective(&cand);
        if d.is_finite() && d <= dev {
            return Some((cand, d));
        }
        delta *= 0.5;
    }
    None
}

fn fit_single(family: Family, z: &DMatrix<f64>, y: &[f64], ctrl: &FitControl) -> Result<IrwlsFit, LeafError> {
    let n = y.len() as f64;
    let p = z.ncols();
    let ybar = y.iter().sum::<f64>() / n;
    let mut beta = DVector::<f64>::zeros(p);
    beta[p - 1] = match family {
        Family::Bernoulli => {
            let q = (ybar * n + 0.5) / (n + 1.0);
            log(q) - log(1.0 - q)
        }
        _ => log(ybar + 0.1),
    };
    let objective = |b: &DVector<f64>| penalized_deviance(family, z, y, b, ctrl.ridge);
    let mut dev = objective(&beta);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..ctrl.max_iters {
        iterations += 1;
        let eta = z * &beta;
        let (mu, w): (Vec<f64>, Vec<f64>) = eta
            .iter()
            .map(|&e| match family {
                Family::Bernoulli => {
                    let m = sigmoid(e);
                    (m, m * (1.0 - m))
                }
                _ => {
                    let m = exp(e);
                    (m, m)
                }
            })
            .unzip();
        let mut zw = z.clone();
        for (i, wi) in w.iter().enumerate() {
            zw.row_mut(i).scale_mut(*wi);
        }
        let mut h = z.tr_mul(&zw);
        for j in 0..p {
            h[(j, j)] += ctrl.ridge;
        }
        let resid = DVector::from_iterator(y.len(), y.iter().zip(&mu).map(|(a, b)| a - b));
        let g = z.tr_mul(&resid) - &beta * ctrl.ridge;
        let delta = solve_svd(h, &g).ok_or_else(|| LeafError::Numeric("singular IRWLS system".into()))?;
        let Some((nb, nd)) = accept_step(&beta, delta, dev, objective) else {
            converged = true;
            break;
        };
        let rel = (dev - nd).abs() / (nd.abs() + 0.1);
        beta = nb;
        dev = nd;
        trace.push(dev);
        if rel < ctrl.tol {
            converged = true;
            break;
        }
    }
    let leaf = GlmLeaf::new(family, beta.iter().copied().collect(), 1.0)?;
    Ok(IrwlsFit { leaf, deviance_trace: trace, iterations, converged })
}

fn categorical_deviance(c: usize, z: &DMatrix<f64>, y: &[f64], theta: &DVector<f64>, ridge: f64) -> f64 {
    let p = z.ncols();
    let mut ll = 0.0;
    let mut eta = vec![0.0; c];
    for (i, &yi) in y.iter().enumerate() {
        for (k, e) in eta.iter_mut().enumerate() {
            *e = (0..p).map(|j| z[(i, j)] * theta[k * p + j]).sum();
        }
        ll += eta[yi as usize] - math::log_sum_exp(&eta);
    }
    -2.0 * ll + ridge * theta.norm_squared()
}

fn fit_categorical(c: usize, z: &DMatrix<f64>, y: &[f64], ctrl: &FitControl) -> Result<IrwlsFit, LeafError> {
    let n = y.len();
    let p = z.ncols();
    let dim = c * p;
    let mut theta = DVector::<f64>::zeros(dim);
    for k in 0..c {
        let count = y.iter().filter(|&&v| v as usize == k).count() as f64;
        theta[k * p + p - 1] = log((count + 0.5) / (n as f64 + 0.5 * c as f64));
    }
    let objective = |t: &DVector<f64>| categorical_deviance(c, z, y, t, ctrl.ridge);
    let mut dev = objective(&theta);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut iterations = 0;
    let mut eta = vec![0.0; c];
    for _ in 0..ctrl.max_iters {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = -(&theta * ctrl.ridge);
        for i in 0..n {
            for (k, e) in eta.iter_mut().enumerate() {
                *e = (0..p).map(|j| z[(i, j)] * theta[k * p + j]).sum();
            }
            let prob = math::softmax(&eta);
            for k in 0..c {
                let ind = if y[i] as usize == k { 1.0 } else { 0.0 };
                for a in 0..p {
                    g[k * p + a] += (ind - prob[k]) * z[(i, a)];
                }
                for k2 in 0..c {
                    let wkk = prob[k] * (if k == k2 { 1.0 } else { 0.0 } - prob[k2]);
                    if wkk == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        let za = z[(i, a)] * wkk;
                        for b in 0..p {
                            h[(k * p + a, k2 * p + b)] += za * z[(i, b)];
                        }
                    }
                }
            }
        }
        for j in 0..dim {
            h[(j, j)] += ctrl.ridge;
        }
        let delta = solve_svd(h, &g).ok_or_else(|| LeafError::Numeric("singular multinomial system".into()))?;
        let Some((nt, nd)) = accept_step(&theta, delta, dev, objective) else {
            converged = true;
            break;
        };
        let rel = (dev - nd).abs() / (nd.abs() + 0.1);
        theta = nt;
        dev = nd;
        trace.push(dev);
        if rel < ctrl.tol {
            converged = true;
            break;
        }
    }
    let leaf = GlmLeaf::new(Family::Categorical(c), theta.iter().copied().collect(), 1.0)?;
    Ok(IrwlsFit { leaf, deviance_trace: trace, iterations, converged })
}
