//! Hierarchical spatio-temporal Swin masked autoencoder for satellite
//! time-series cubes.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod patching;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
