//! Duality-gap based block coordinate descent for convex generalized linear
//! models, with a two-unit heterogeneous training loop and built-in
//! verification of its per-step and rate guarantees at desk scale.

pub mod data;
pub mod engine;
pub mod error;
pub mod local;
pub mod metrics;
pub mod problem;
pub mod select;

pub use error::{Error, Result};
