//! Deterministic numeric kernels shared by the estimators and the simulation
//! harness.

mod kde;
mod linalg;
mod quantile;
mod rng;

pub use kde::{gaussian_kde, scott_bandwidth, DensityEstimate};
pub use linalg::{
    check_finite, inverse_checked, spectral_norm, sym_inv_sqrt, sym_sqrt, symmetrize,
    CONDITION_LIMIT,
};
pub use quantile::{normal_quantile, standard_normal_ppf};
pub use rng::RandomStream;
