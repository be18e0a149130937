//! Score-divergence distillation of one-step generators, with reward
//! alignment, on Gaussian mixtures with closed-form oracles.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod error;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod processes;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
