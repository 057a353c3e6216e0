pub mod baselines;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod explainer;
pub mod hetgraph;
pub mod metrics;
pub mod predictor;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
