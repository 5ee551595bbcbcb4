pub mod csbp;
pub mod error;
pub mod experiment;
pub mod heightfield;
pub mod pathops;
pub mod pruning;
pub mod reflected;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
