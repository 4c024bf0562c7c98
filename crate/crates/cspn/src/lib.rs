//! File formats, dataset loaders, parallel executors and the command-line
//! interface around `cspn-core`.

pub mod abcspn_io;
pub mod cli;
pub mod config;
pub mod error;
pub mod images;
pub mod model_io;
pub mod parallel;
pub mod tabular;

pub use cspn_core as core;
