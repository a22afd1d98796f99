pub mod baseline;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod index;
pub mod records;
pub mod scoring;
pub mod serialize;
pub mod synthbench;
pub mod train;

pub use error::{Error, Result};
