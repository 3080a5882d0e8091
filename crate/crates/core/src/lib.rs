pub mod basenets;
pub mod error;
pub mod harness;
pub mod memory;
pub mod nn;
pub mod parallel;
pub mod retention;
pub mod rl;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
