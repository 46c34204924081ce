//! Linear instrumental-variable estimation with finite-sample error bounds,
//! data-driven confidence intervals, synthetic ensembles with exact population
//! moments, a Monte Carlo study harness, and a spatial smoke-index instrument
//! builder.
//!
//! Matrices are `nalgebra` dynamic matrices with one row per observation.

// Negated comparisons are how the validators reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod confint;
pub mod ensembles;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod instrument;
pub mod numerics;

pub use error::{IvError, Result};
pub use estimator::{IVDataset, IVFit, LiftedDataset, SandwichCovariance};

/// Version tag embedded in every JSON/CSV artifact the crate writes.
pub const SCHEMA_VERSION: u32 = 1;
