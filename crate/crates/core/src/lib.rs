//! Bias quantification and correction for treatment-effect estimates under
//! spatial interference and spatial confounding.
//!
//! The crate is organised bottom-up:
//!
//! - [`geo`]: locations, distances, correlation kernels, random fields;
//! - [`weights`]: k-nearest-neighbour and distance-threshold interference weights;
//! - [`dgp`]: data-generating models with interference and confounding terms;
//! - [`estimate`]: OLS, GLS and Gaussian maximum likelihood fits;
//! - [`bias`]: closed-form bias expressions and the interference correction;
//! - [`montecarlo`]: seeded replicate studies and summary metrics.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bias;
pub mod dgp;
pub mod error;
pub mod estimate;
pub mod geo;
pub mod linalg;
pub mod montecarlo;
pub mod optim;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
pub use rng::Seed;
