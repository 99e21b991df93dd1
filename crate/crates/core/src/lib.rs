pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod temporal_nn;
pub mod training;

pub use error::{Error, Result};
