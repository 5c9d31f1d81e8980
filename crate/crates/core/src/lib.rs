pub mod aggregation;
pub mod embeddings;
pub mod error;
pub mod labels;
mod math;
pub mod prompts;
pub mod prediction;
pub mod losses;
pub mod model;
pub mod data;
pub mod metrics;
pub mod trainer;
pub mod synth;
pub mod interpretation;
pub mod checkpoint;
pub mod cli;
pub mod gradcheck;

pub use error::{Error, Result};
