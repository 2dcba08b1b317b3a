//! Dual-prototype forecasting: a learnable bank of common and rare temporal
//! prototypes, routed by Pearson similarity and fused into a forecasting head.

// Validation uses `!(x > 0.0)` style checks on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bank;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
