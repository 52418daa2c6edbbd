pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
