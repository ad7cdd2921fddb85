pub mod blocks;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod gates;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
