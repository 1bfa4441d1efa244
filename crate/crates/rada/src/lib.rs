//! Barely-supervised 3D segmentation: three orthogonally-oriented V-Nets
//! cross-supervise each other from three annotated slices per labeled volume,
//! with registration-propagated pseudo-labels and text/region guidance.

pub mod error;
pub mod nn;
pub mod register;
pub mod volume;

pub use error::{RadaError, Result};

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    0
}
