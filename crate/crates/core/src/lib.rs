//! Multi-resolution crowd density estimation: dataset manifests, Gaussian
//! ground truth, patch sampling, the encoder-decoder network, training,
//! tiled inference and counting/detection metrics.

pub mod config;
pub mod dataset;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod loss;
pub mod model;
pub mod patches;
pub mod raster;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
