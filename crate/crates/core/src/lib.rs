//! Parametric postprocessing and probabilistic verification of gridded
//! ensemble precipitation forecasts.
//!
//! The crate covers two censored distribution families for precipitation
//! (a zero-truncated normal with a point mass at zero, and a
//! censored-shifted gamma), their closed-form CRPS, moments-method fitting
//! with a tail extension for quantile forecasts, a small U-Net trained by
//! CRPS minimization, and the verification suite (CRPS skill, rank
//! histograms with flatness tests, ROC curves).

pub mod cli;
pub mod datagen;
pub mod dataio;
pub mod dist;
pub mod dual;
pub mod error;
pub mod fitting;
pub mod grid;
pub mod gridnet;
pub mod quad;
pub mod quantiles;
pub mod scoring;
pub mod special;
pub mod verification;

pub use error::{Error, Result};
