//! Geometry, synthetic data and evaluation for latent-action camera pose estimation.
//!
//! Everything in this crate is plain `f64` math with no model code, so it also builds for
//! `wasm32` and backs the browser demo.

pub mod geometry;
pub mod metrics;
pub mod synthworld;
