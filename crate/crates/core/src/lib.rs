pub mod agent;
pub mod baselines;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod primitives;
pub mod registration;
pub mod tensor;

pub use error::{Error, Result};
