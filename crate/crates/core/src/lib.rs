//! Toolkit for a compact anchor-free object detector aimed at edge devices.

pub mod augment;
pub mod data;
pub mod error;
pub mod geometry;
pub mod head;
pub mod io;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod reparam;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
