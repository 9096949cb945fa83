//! Event-synchronous spiking forecaster for irregular multivariate time series.

pub mod backbone;
pub mod data;
pub mod downsample;
pub mod encoder;
pub mod energy;
pub mod error;
pub mod head;
pub mod neuron;
pub mod numerics;
pub mod params;
pub mod sweep;

pub use error::{Error, Result};
