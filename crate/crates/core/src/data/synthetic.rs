//! Synthetic generators with known conditional-independence structure.
//!
//! Every generator records its name and ground truth in
//! [`Dataset::metadata`]:
//!
//! * `ci_pair`: `x ~ U(-pi, pi)`, `y0 = sin(x) + 0.3 e0`, `y1 = cos(x) + 0.3 e1`.
//!   Conditionally independent, marginally dependent.
//! * `dependent_pair`: `x ~ N(0, 1)`, `y0 = x + e0`, `y1 = y0 + 0.1 e1`.
//! * `two_blob_gating`: latent `z ~ Bern(0.5)`, `x ~ N(+-2 (1, 1), I)`; the two
//!   targets follow a different linear-Gaussian regime per blob and share a
//!   per-row latent so they stay dependent given `x`.
//! * `poisson_glm`: `x ~ N(0, I_d)`, `y ~ Poisson(exp(c . [x; 1]))`.
//! * `block_factorized`: `x ~ N(0, I_2)`; each group `g` has a latent
//!   `u_g ~ N(0, 1)` and `y = a x0 + b x1 + u_g + 0.5 e`. Groups are
//!   conditionally independent given `x`, members of a group are not.
//!
//! `e*` are independent standard normals throughout.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{ColumnType, DataError, Dataset};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    CiPair,
    DependentPair,
    TwoBlobGating,
    /// Coefficients over `[x; 1]` (intercept last).
    PoissonGlm { coeffs: Vec<f64> },
    BlockFactorized { group_sizes: Vec<usize> },
}

impl Generator {
    /// Parses a generator name with its default parameters.
    pub fn parse(name: &str) -> Result<Generator, DataError> {
        match name {
            "ci_pair" => Ok(Generator::CiPair),
            "dependent_pair" => Ok(Generator::DependentPair),
            "two_blob_gating" => Ok(Generator::TwoBlobGating),
            "poisson_glm" => Ok(Generator::PoissonGlm { coeffs: vec![0.5, -0.3, 0.2] }),
            "block_factorized" => Ok(Generator::BlockFactorized { group_sizes: vec![2, 2] }),
            other => Err(DataError::Invalid(format!("unknown synthetic generator '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Generator::CiPair => "ci_pair",
            Generator::DependentPair => "dependent_pair",
            Generator::TwoBlobGating => "two_blob_gating",
            Generator::PoissonGlm { .. } => "poisson_glm",
            Generator::BlockFactorized { .. } => "block_factorized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    let n = spec.n;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut r = rng::seeded(seed);
    let (mut ds, truth) = match &spec.generator {
        Generator::CiPair => {
            let mut y = Vec::with_capacity(2 * n);
            let mut x = Vec::with_capacity(n);
            for _ in 0..n {
                let xv = (r.random::<f64>() * 2.0 - 1.0) * core::f64::consts::PI;
                y.push(libm::sin(xv) + 0.3 * normal(&mut r));
                y.push(libm::cos(xv) + 0.3 * normal(&mut r));
                x.push(xv);
            }
            let t = [ColumnType::Continuous; 2];
            (Dataset::from_blocks(&t, y, &[ColumnType::Continuous], x)?, "0|1")
        }
        Generator::DependentPair => {
            let mut y = Vec::with_capacity(2 * n);
            let mut x = Vec::with_capacity(n);
            for _ in 0..n {
                let xv = normal(&mut r);
                let y0 = xv + normal(&mut r);
                y.push(y0);
                y.push(y0 + 0.1 * normal(&mut r));
                x.push(xv);
            }
            let t = [ColumnType::Continuous; 2];
            (Dataset::from_blocks(&t, y, &[ColumnType::Continuous], x)?, "0,1")
        }
        Generator::TwoBlobGating => {
            let mut y = Vec::with_capacity(2 * n);
            let mut x = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let z = r.random::<f64>() < 0.5;
                let c = if z { 2.0 } else { -2.0 };
                let x0 = c + normal(&mut r);
                let x1 = c + normal(&mut r);
                let u = normal(&mut r);
                let (a, b) = if z {
                    (-2.0 - 0.5 * x1 + u, 3.0 - u + 0.3 * normal(&mut r))
                } else {
                    (1.0 + 0.5 * x0 + 0.5 * u, -1.0 + u + 0.3 * normal(&mut r))
                };
                y.push(a);
                y.push(b);
                x.push(x0);
                x.push(x1);
            }
            let t = [ColumnType::Continuous; 2];
            (Dataset::from_blocks(&t, y, &t, x)?, "0,1")
        }
        Generator::PoissonGlm { coeffs } => {
            if coeffs.is_empty() {
                return Err(DataError::Invalid("poisson_glm needs at least an intercept".into()));
            }
            let d = coeffs.len() - 1;
            let mut y = Vec::with_capacity(n);
            let mut x = Vec::with_capacity(n * d);
            for _ in 0..n {
                let mut eta = coeffs[d];
                for c in coeffs.iter().take(d) {
                    let v = normal(&mut r);
                    eta += c * v;
                    x.push(v);
                }
                let mu = libm::exp(eta);
                let draw: f64 = Poisson::new(mu)
                    .map_err(|e| DataError::Invalid(format!("poisson mean {mu}: {e}")))?
                    .sample(&mut r);
                y.push(draw);
            }
            (
                Dataset::from_blocks(&[ColumnType::Count], y, &vec![ColumnType::Continuous; d], x)?,
                "0",
            )
        }
        Generator::BlockFactorized { group_sizes } => {
            if group_sizes.contains(&0) {
                return Err(DataError::Invalid("empty group".into()));
            }
            let ny: usize = group_sizes.iter().sum();
            let mut y = Vec::with_capacity(n * ny);
            let mut x = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let x0 = normal(&mut r);
                let x1 = normal(&mut r);
                let mut k = 0usize;
                for &g in group_sizes {
                    let u = normal(&mut r);
                    for _ in 0..g {
                        let a = libm::sin(1.0 + k as f64);
                        let b = libm::cos(2.0 + k as f64);
                        y.push(a * x0 + b * x1 + u + 0.5 * normal(&mut r));
                        k += 1;
                    }
                }
                x.push(x0);
                x.push(x1);
            }
            let t = vec![ColumnType::Continuous; ny];
            let ds = Dataset::from_blocks(&t, y, &[ColumnType::Continuous; 2], x)?;
            let mut start = 0;
            let parts: Vec<String> = group_sizes
                .iter()
                .map(|&g| {
                    let s: Vec<String> = (start..start + g).map(|i| i.to_string()).collect();
                    start += g;
                    s.join(",")
                })
                .collect();
            let mut ds = ds;
            ds.metadata.insert("partition".into(), parts.join("|"));
            ds.metadata.insert("generator".into(), spec.generator.name().into());
            return Ok(ds);
        }
    };
    ds.metadata.insert("generator".into(), spec.generator.name().into());
    ds.metadata.insert("partition".into(), truth.into());
    Ok(ds)
}

/// Parses a `partition` metadata string (`"0,1|2"`) into blocks.
pub fn parse_partition(s: &str) -> Vec<Vec<usize>> {
    s.split('|')
        .map(|b| b.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .collect()
}

/// An `n x d` autoregressive count series. A shared latent AR(1) factor
/// (persistence 0.9) and per-sensor AR(1) terms (persistence 0.8) drive
/// Poisson counts with rate `exp(2.3 + 0.5 f_t + 0.35 e_{t,j})`.
pub fn ar_count_series(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let mut f = 0.0;
    let mut e = vec![0.0; d];
    let burn_in = 50;
    let mut out = Vec::with_capacity(n * d);
    for t in 0..n + burn_in {
        f = 0.9 * f + libm::sqrt(1.0 - 0.81) * normal(&mut r);
        for ej in e.iter_mut() {
            *ej = 0.8 * *ej + libm::sqrt(1.0 - 0.64) * normal(&mut r);
        }
        for (j, ej) in e.iter().enumerate() {
            let rate = libm::exp(2.3 + 0.5 * f + 0.35 * ej + 0.1 * (j % 3) as f64);
            let c: f64 = Poisson::new(rate).expect("finite positive rate").sample(&mut r);
            if t >= burn_in {
                out.push(c);
            }
        }
    }
    out
}
