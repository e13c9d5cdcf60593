//! Sparse diffusion transformer: poolingformer bottom layers, sparse-dense
//! token modules in the middle, dense top layers, and a timestep-wise token
//! pruning schedule, with a small DDPM/DDIM harness and an analytic FLOPs
//! counter.

pub mod analysis;
pub mod blocks;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod grid;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use params::Params;
