//! Joint modeling of longitudinal signals and time-to-event data.
//!
//! A multivariate Gaussian convolution process shares latent functions across
//! unit-level signals, a sparse pseudo-input approximation keeps inference in
//! O(n M^2), and a Cox model maps the inferred signal posterior to failure
//! probabilities. The crate also ships the matching synthetic-data generator,
//! an evaluation harness (windowed event classification, ROC/AUC, remaining
//! life errors, logistic-regression baseline), CSV/C-MAPSS ingestion, model
//! persistence, and a command-line interface.

pub mod cox;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod quadrature;
pub mod sparse_gp;
pub mod spline;

pub use cox::{BaselineHazardCurve, CoxParams, MgfForm, SurvivalCurve};
pub use datagen::{GenConfig, UnitRecord};
pub use error::{Error, Result};
pub use inference::{FitConfig, FittedModel, GradientMode, ModelParams};
pub use kernels::{GramSet, KernelParams};
pub use sparse_gp::{SignalPosterior, VariationalPosterior};
