//! Kernelized data-driven prediction and predictive control.
//!
//! Trajectory windows of a recorded input/output experiment are compared
//! through a kernel on each channel. A query window is a plausible system
//! trajectory when its kernel embedding lies in the span of the data windows;
//! prediction completes a partly known window so that this membership residual
//! vanishes, and control does the same while minimizing a stage cost.

pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod hankel;
pub mod io;
pub mod kernels;
pub mod linear;
pub mod optim;
pub mod plants;
pub mod predictor;
pub mod rng;

pub(crate) mod objective;

pub use error::{Error, Result};
