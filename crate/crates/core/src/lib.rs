//! Unsupervised adaptation of depth-prediction networks from stereo
//! pseudo-labels.
//!
//! Classical matchers ([`stereo`]) produce noisy disparity labels, the
//! estimators in [`confidence`] grade them, and the loss family in
//! [`losses`] fine-tunes a small differentiable predictor ([`model`]) on a
//! target domain without ground truth ([`adapt`]). [`synth`] generates the
//! domain-shifted stereo scenes used to exercise the whole chain.

pub mod adapt;
pub mod cli;
pub mod autodiff;
pub mod confidence;
pub mod diagnostics;
pub mod error;
pub mod formats;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stereo;
pub mod synth;

pub use error::{Error, Result};
