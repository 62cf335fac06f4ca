//! Wafer-level identification of pressure-sensor membranes from measured
//! modal frequencies.
//!
//! The pipeline runs closed-loop on simulated wafers:
//!
//! 1. [`plate_model`] computes modal frequencies of a prestressed membrane
//!    over a (thickness, stress) grid.
//! 2. [`surrogate`] fits inverse polynomials mapping frequency combinations
//!    back to parameters.
//! 3. [`response_synth`] produces synthetic vibrometer spectra for dies with
//!    known ground truth and defects.
//! 4. [`peak_detect`] picks resonance peaks.
//! 5. [`identify`] assigns peaks to modes by minimizing the estimated
//!    identification error (EIE) and classifies the die.
//! 6. [`static_correlate`] checks the identified parameters against a
//!    simulated pressure sweep of the piezoresistive bridge.
//! 7. [`wafer`] orchestrates whole wafers and writes reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod identify;
pub mod peak_detect;
pub mod plate_model;
pub mod response_synth;
pub mod static_correlate;
pub mod surrogate;
pub mod units;
pub mod wafer;

pub use error::{Error, Result};
