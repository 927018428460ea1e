//! Multi-kernel diffusion convolutional networks for point clouds.

pub mod cli;
pub mod error;
pub mod eval;
pub mod net;
pub mod pointset;
pub mod rng;
pub mod spectral;
pub mod spgraph;
pub mod tasks;

pub use error::{Error, Result};
