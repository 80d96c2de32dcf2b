pub mod data;
pub mod encoding;
pub mod error;
pub mod benchmark;
pub mod cli;
pub mod flow;
pub mod metrics;
pub mod models;
pub mod sampler;

pub use error::{Error, Result};
