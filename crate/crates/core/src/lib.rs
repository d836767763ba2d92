//! Score-driven adaptive normalization for non-stationary time series.
//!
//! A per-feature GAS filter tracks a time-varying mean and variance online.
//! Inputs are standardized with the one-step-ahead moments, a downstream
//! forecaster predicts standardized residuals, and the filter's own moment
//! forecasts turn those residuals back into levels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod eval;
pub mod fit;
pub mod forecaster;
pub mod gas;
pub mod normalization;
pub mod optim;
pub mod timeseries;

pub use error::{Error, Result};
pub use gas::{FilterState, FilterTrace, Family, GasParams, Moments, VARIANCE_FLOOR};
pub use timeseries::{SeriesFrame, SplitSpec, Window};
