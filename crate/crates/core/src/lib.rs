pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod data;
pub mod editing;
pub mod encoder;
pub mod error;
pub mod extractors;
pub mod generator;
pub mod gradcheck;
pub mod image_io;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod padding;
pub mod params;
pub mod train;

pub use error::{LabError, Result};
