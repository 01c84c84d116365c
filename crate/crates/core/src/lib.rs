pub mod adapter;
pub mod bench;
pub mod cli;
pub mod data;
pub mod dtf;
pub mod error;
pub mod fusion;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
