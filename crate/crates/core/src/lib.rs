//! Numerical lab for g-expectations and g-harmonic functions.
//!
//! Diffusions, drivers and fields live in [`model`]; [`paths`] simulates
//! them, [`bsde`] solves the backward equation by regression, [`pde`] runs
//! an explicit finite difference scheme for the same problems and
//! [`harness`] wires the pieces into martingale, mean-value and comparison
//! checks.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod error;
pub mod expr;
pub mod fd;
pub mod generator;
pub mod harness;
pub mod model;
pub mod paths;
pub mod pde;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
