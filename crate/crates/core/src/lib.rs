#![no_std]
// `!(x > 0.0)` is the idiom for "not positive, or NaN" throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod abcspn;
pub mod circuit;
pub mod citest;
pub mod data;
pub mod lbfgs;
pub mod learn;
pub mod leaves;
pub mod linalg;
pub mod math;
pub mod optimize;
pub mod random_circuit;
pub mod rng;
