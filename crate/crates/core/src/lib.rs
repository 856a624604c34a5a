//! Differentiable single-view novel-view synthesis: planar coarse rendering,
//! volumetric refinement with an MLP decoder, and depth supervision.

pub mod check;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod sampler;
pub mod scene;

pub use error::{Error, Result};
