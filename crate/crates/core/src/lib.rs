//! Learned image codec with multi-reference context entropy modelling.

pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod entropy;
pub mod error;
pub mod image_io;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod selective;
pub mod coding;
pub mod nn_blocks;
pub mod params;
pub mod refine;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
