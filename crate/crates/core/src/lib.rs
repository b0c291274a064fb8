pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
