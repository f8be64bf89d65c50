//! Reconstruction of room impulse responses on a virtual spatial grid from
//! moving-microphone measurements.
//!
//! A single fixed source drives the room with a periodic excitation while
//! one or more microphones move along known trajectories. Every recorded
//! sample is modelled as the excitation filtered by the RIR at the
//! microphone position, and that RIR is interpolated from the unknown RIRs on
//! an equidistant grid. Solving the resulting linear system recovers the grid
//! RIRs. With a perfect periodic excitation the system splits into one small
//! problem per excitation phase.
//!
//! Module overview:
//! - [`signals`]: MLS and flat-spectrum excitations, circulant helpers.
//! - [`room`]: image-source ground truth and the `.sfr` RIR file format.
//! - [`geometry`]: the virtual grid and microphone trajectories.
//! - [`interp`]: linear and Lagrange interpolation weights.
//! - [`system`]: measurement simulation and system assembly.
//! - [`solve`]: least-squares, ridge, decoupled and static recovery.
//! - [`analysis`]: misalignment metric and closed-form error prediction.
//! - [`config`], [`experiment`]: configuration files and experiment pipelines.

pub mod analysis;
pub mod config;
mod error;
pub mod experiment;
pub mod geometry;
pub mod interp;
pub mod room;
pub mod signals;
pub mod solve;
pub mod system;

pub use error::{Error, Result};

/// A point in room coordinates, meters.
pub type Vec3 = [f64; 3];
