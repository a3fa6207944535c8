//! Probability densities over the rows of bottleneck weight matrices, and the
//! machinery to evolve them.
//!
//! A weight matrix with `m` rows of width two is treated as `m` draws from a
//! density `P(x1, x2)` on the plane. This crate estimates such densities from
//! point clouds, evolves them under a drift-diffusion equation whose drift is
//! built from the optimizer's own row updates, and provides the analytic
//! companions (the potential equation for `V = -log P`, the scale-flow form
//! and its stationary solutions).
//!
//! Everything here is pure computation over in-memory buffers; file formats,
//! run directories and the command line live in the `weightflow` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autoencoder;
pub mod callan_symanzik;
pub mod comparison;
pub mod dataset;
pub mod drift;
mod error;
pub mod fokker_planck;
pub mod grid;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{Density, Grid2D, PointCloud, PotentialField};
