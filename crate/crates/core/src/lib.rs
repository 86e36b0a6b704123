pub mod config;
pub mod dgp;
pub mod error;
pub mod forecast;
pub mod ingest;
pub mod pipeline;
pub mod pricing;
pub mod stats;
pub mod strategy;

pub use error::{Error, Result};
