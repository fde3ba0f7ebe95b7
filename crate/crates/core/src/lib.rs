//! Sampling-based model predictive control with learned, environment-aware
//! control-sequence distributions.

pub mod checkpoint;
pub mod controllers;
pub mod dataset;
pub mod dynamics;
pub mod envgen;
pub mod flow;
pub mod error;
pub mod grid;
pub mod nn;
pub mod posterior;
pub mod vae;

pub use error::{Error, Result};
