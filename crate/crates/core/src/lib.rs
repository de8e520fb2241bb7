//! Ensemble Kalman filtering on Lorenz-96 with a localization radius chosen
//! per cycle by a random forest.
//!
//! The pipeline: [`lorenz96`] integrates the model, [`enkf`] runs localized
//! analyses, [`metrics`] scores them, [`features`] summarizes forecasts, and
//! [`adaptive`] ties these to a [`forest`] that learns which radius to use.

pub mod adaptive;
pub mod cli;
pub mod config;
pub mod enkf;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod forest;
pub mod localization;
pub mod lorenz96;
pub mod metrics;
pub mod output;
pub mod rng;

pub use error::{Error, Result};
