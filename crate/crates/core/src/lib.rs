//! Numerical laboratory for the failure of almost-everywhere localization of
//! free Schrödinger means below the `n/(2(n+1))` Sobolev threshold.
//!
//! The crate builds the explicit counterexample family (plateau bump packets
//! modulated to frequency `-R`, tensored with lattice exponential sums at
//! spacing `D`), evaluates `S_t` on it through several independent routes,
//! and checks the norm scalings, envelope estimates and divergence
//! certificates numerically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod construction;
pub mod divergence;
pub mod envelope;
pub mod error;
pub mod fit;
pub mod phase;
pub mod profiles;
pub mod propagator;
pub mod quad;
pub mod report;
pub mod sobolev;
pub mod stats;

pub use error::{LabError, Result};
