pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
