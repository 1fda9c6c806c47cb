pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod surgery;
pub mod train;

pub use error::{Error, Result};
