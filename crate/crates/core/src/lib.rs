//! Capacity diagnostics for softmax-style attention normalization.
//!
//! The crate evaluates weight bounds, top-N selection distances, geometric
//! separability and gradient sensitivity of attention normalizers, either on
//! tensor dumps of a real model or on synthetic data that satisfies the
//! spherical-embedding assumptions. The [`experiment`] module wires these
//! pieces into reproducible sweeps that emit JSON/CSV reports.

pub mod distance;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradient;
pub mod matrix;
pub mod normalization;
pub mod rng;
pub mod stats;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;
