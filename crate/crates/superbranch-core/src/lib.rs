//! Non-local branching particle systems and their superprocess limits on
//! finite site spaces.
//!
//! The crate has three layers:
//!
//! * [`mechanism`] — branching-mechanism representations (local `phi`,
//!   non-local `zeta`/`psi`), their evaluation, and the construction of
//!   density-`k` particle-level laws that converge to a given limit
//!   mechanism as `k` grows.
//! * [`engine`] — exact event-driven simulation of the particle systems
//!   (per-particle exponential clocks, thinning for age-dependent rates,
//!   rebirth, mass and age flows) with reproducible counter-derived RNG
//!   streams.
//! * [`cumulant`] / [`moment`] — fixed-step solvers for the limiting
//!   nonlinear cumulant equations and the linear first-moment semigroups,
//!   with an independent Picard (mild-form) route for cross-validation.
//!
//! [`zoo`] assembles the derived models (rebirth, k-type, controlled
//! immigration, mass-structured, multilevel, age-reproduction) on top of
//! those layers, [`sampler`] draws random valid systems for property and
//! convergence tests, and [`stats`] carries the Monte Carlo comparison
//! harness.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the companion
//! `superbranch-cli` crate carries configuration files, CSV output and the
//! command-line interface.

#![cfg_attr(not(feature = "std"), no_std)]
// Validation uses `!(x > 0.0)`-style guards on purpose: the negation also
// rejects NaN, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod cumulant;
pub mod engine;
pub mod linalg;
pub mod mechanism;
pub mod moment;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod zoo;

mod age_core;

pub use mechanism::{
    AgeConfig, AgeProfile, JumpAtom, LimitSystemSpec, LocalMechanism, MassFlow, MassLocal,
    MechanismError, MotionGenerator, NonlocalMechanism, ParticleLaws, SiteMeasure, SiteSpace,
    TestFunction,
};
