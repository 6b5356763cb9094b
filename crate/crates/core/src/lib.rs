pub mod coupling;
pub mod density;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod hitting;
pub mod noise;
pub mod seminorm;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
