pub mod augmentation;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod loss;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
