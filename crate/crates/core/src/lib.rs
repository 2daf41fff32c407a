//! Post-hoc inference for survey microdata calibrated to hierarchical Bayes
//! domain totals.
//!
//! The pipeline: fit HB models to get draws of the `p = V·D` domain totals
//! ([`hb`]), build the Gram matrix and calibrate design weights to any target
//! ([`calibration`]), push every draw through the affine calibration map to
//! get replicate cell totals and credible intervals ([`phie`]), add the
//! design-based share variance for cells that are not calibration constraints
//! ([`cbi`]), and check coverage by repeated sampling from a synthetic
//! population ([`sim`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod calibration;
pub mod cbi;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod hb;
pub mod ingest;
pub mod linalg;
pub mod phie;
pub mod report;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
