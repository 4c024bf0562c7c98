//! Thread-pool execution of independent pairwise tests.
//!
//! Every pair draws from its own seed stream and results are collected in
//! job order, so output is identical to serial execution.

use cspn_core::citest::{CiError, CiTestResult, PairExecutor, SerialPairs};
use rayon::prelude::*;

/// Runs jobs on the rayon pool the caller is installed in.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonPairs;

impl PairExecutor for RayonPairs {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> Result<CiTestResult, CiError> + Sync),
    ) -> Vec<Result<CiTestResult, CiError>> {
        (0..jobs).into_par_iter().map(job).collect()
    }
}

/// Serial execution for one thread, the rayon executor otherwise.
pub fn executor(threads: usize) -> &'static dyn PairExecutor {
    if threads <= 1 {
        &SerialPairs
    } else {
        &RayonPairs
    }
}

/// Runs `f` inside a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    Ok(pool.install(f))
}
