pub mod checkpoint;
pub mod consolidation;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod interest;
pub mod ltm;
pub mod seeds;
pub mod stm;
pub mod tensor;

pub use error::{Error, Result};
