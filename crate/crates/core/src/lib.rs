//! Hybrid quantum-classical time-series anomaly detection.
//!
//! A generator built from a quantum-gated GRU forecasts the next step of a
//! multivariate series as a diagonal Gaussian, a Wasserstein critic with the
//! same backbone judges forecasts, and a two-stage gated scoring pipeline turns
//! both into anomaly flags. Everything quantum runs on the small statevector
//! simulator in [`qsim`].

pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod qsim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
