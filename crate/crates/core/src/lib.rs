pub mod convolve;
pub mod error;
pub mod eval;
pub mod filters;
pub mod hvsm;
pub mod image;
mod json;
pub mod optics;
pub mod projection;
pub mod scoring;
pub mod wsi;

pub use error::{Error, Result};
pub use json::write_atomic;
