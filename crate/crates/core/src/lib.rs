//! Optimization-induced equilibrium networks.
//!
//! Equilibrium layers `z = f(z)` whose maps are proximal operators of
//! explicit convex functions, deep compositions of them, fixed-point
//! solvers that can select among fixed points, and two training paths
//! (unrolled reverse mode and implicit differentiation).

pub mod activations;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod deepnet;
pub mod error;
mod fixtures;
pub mod metrics;
pub mod parallel;
pub mod regularizers;
pub mod solvers;
pub mod tensors;
pub mod training;
pub mod unitlayer;
pub mod verify;

pub use activations::Activation;
pub use error::{Error, Result};
pub use tensors::{Matrix, Vector};
