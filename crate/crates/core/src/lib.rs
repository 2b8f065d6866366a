pub mod checkpoint;
pub mod config;
pub mod error;
pub mod factorized;
pub mod linalg;
pub mod model;
pub mod plan;
pub mod spectrum;
pub mod trainer;

pub use error::{Error, Result};
