//! Mean-field SDEs driven by fractional Brownian motion (H > 1/2).
//!
//! The solver never time-steps the SDE. Each path is a closed-form functional of
//! a Wiener increment array and a handful of deterministic law curves, and the
//! law curves are found by Picard iteration over a fixed path ensemble. The same
//! closed forms give the Malliavin derivative, the first-variation flow and the
//! Bismut-Elworthy-Li weights used for sensitivities.
//!
//! Module map:
//! - [`core_model`]: grids, model specifications, assumption probes
//! - [`frac_ops`]: Riemann-Liouville operators, the Volterra kernel and the fBm operator family
//! - [`fbm_paths`]: counter-based path sampling and Wiener/fBm integrals
//! - [`mf_solver`]: Picard solve for the law curves and per-path solutions
//! - [`sensitivity`]: Malliavin derivatives, flow, weights and finite-difference oracles
//! - [`finance_apps`]: variance-swap and two-factor volatility sensitivities

pub mod core_model;
pub mod error;
pub mod fbm_paths;
pub mod finance_apps;
pub mod frac_ops;
pub mod mf_solver;
pub mod sensitivity;
pub mod stats;

pub use core_model::{build_grid, validate_model, ModelSpec, TimeGrid, ValidationReport};
pub use error::{Error, Result};

pub use fbm_paths::{NoiseSource, PathBundle};
pub use frac_ops::{GridFunction, KernelMatrix};
pub use mf_solver::{Ensemble, LawCurves, Solution, SolutionPath};
pub use sensitivity::{DerivativeCurves, Payoff, WeightBreakdown};
pub use stats::Estimate;
