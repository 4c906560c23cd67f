//! Numerical laboratory for discrete Ricci flows and super Ricci flows.
//!
//! The crate builds model flows on symmetric discretized geometries (circles,
//! truncated lines, flat tori, latitude-grid spheres, rotationally symmetric
//! warped profiles), solves the coupled heat and conjugate heat equations with
//! exact discrete duality, constructs conjugate heat kernel measures, and
//! evaluates transport (variance, W1), pointed Nash entropy and a registry of
//! named inequality checks on top of them.
//!
//! The intended entry points are:
//! * [`flows::make_model_flow`] to build a [`flows::FlowScenario`],
//! * [`scenario::Scenario`] to wrap a flow with kernel and distance caches,
//! * [`checks::run_check`] / [`checks::empirical_constant`] for the registry.

pub mod checks;
pub mod entropy;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod heat;
pub mod scenario;
pub mod transport;

mod solver;

pub use error::{Error, Result};
