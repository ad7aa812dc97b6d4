//! Exposure correction trained against fusion pseudo-labels that are refined
//! by the model's own output.

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::{Image, LumaMap, Raster};
