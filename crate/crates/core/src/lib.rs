pub mod aggregators;
pub mod basemodel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod graphs;
pub mod intention;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod params;
pub mod schema;
pub mod synthetic;
pub mod training;

pub use error::{HienError, Result};
