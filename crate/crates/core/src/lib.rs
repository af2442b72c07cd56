//! Desk-scale flow-matching laboratory.
//!
//! The crate trains a small velocity-field model on synthetic
//! distributions, optionally re-pairing each minibatch with its noise draws
//! through an exact optimal-transport assignment under a negative-cosine
//! cost, and samples from the result with deterministic Euler or
//! Euler-Maruyama integrators driven by uniform, SNR-shifted, or
//! cosine-adaptive time schedules.

pub mod coupling;
pub mod datasets;
pub mod error;
pub mod interpolant;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
