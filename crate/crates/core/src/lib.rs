//! Prototype-concept gray-box models and tools for debugging them.

pub mod attribution;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod losses;
pub mod memory;
pub mod model;
pub mod objective;
pub mod persist;
pub mod pnm;
pub mod protocol;
pub mod raster;
pub mod render;
pub mod report;
pub mod seeding;
pub mod shapes;
pub mod trainer;

pub use error::{Error, Result};
