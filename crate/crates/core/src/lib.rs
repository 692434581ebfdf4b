//! Deformable point cloud registration with a denoised Mean Teacher.

pub mod error;
pub mod geometry;
pub mod model;
pub mod synth;
pub mod adapt;
pub mod cli_io;
pub mod eval;

pub use error::{Error, Result};
