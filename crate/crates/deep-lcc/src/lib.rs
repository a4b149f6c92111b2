//! Data-enabled predictive leading cruise control for mixed platoons.
//!
//! The crate simulates nonlinear car-following traffic with a mix of
//! human-driven and automated vehicles, builds a non-parametric behavioral
//! representation of the platoon from collected trajectory data, and
//! computes safe optimal CAV inputs by solving a regularized predictive
//! quadratic program in receding horizon. A model-based MPC baseline and an
//! all-HDV baseline share the same measurement pipeline for head-to-head
//! comparison, scored by an instantaneous fuel-consumption model.
//!
//! Module map:
//! - [`vehicle`]: nonlinear platoon simulation (car-following law,
//!   integrator, closed-loop driver).
//! - [`model`]: linearized state-space model, discretization, and
//!   controllability/observability analysis.
//! - [`data`]: trajectory-data collection, Hankel matrices, persistent
//!   excitation.
//! - [`qp`]: dense operator-splitting QP solver.
//! - [`controller`]: the data-driven predictive controller.
//! - [`mpc`]: output-feedback MPC baseline.
//! - [`scenario`]: velocity profiles, fuel metric, comparison harness.
//! - [`config`]: the TOML run configuration.

pub mod config;
pub mod controller;
pub mod data;
pub mod error;
mod io_util;
pub mod matexp;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod scenario;
pub mod trajectory;
pub mod vehicle;

pub use error::{Error, Result};
