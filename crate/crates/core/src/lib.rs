//! Jigsaw-puzzle self-supervised pretraining for fully convolutional networks.

pub mod archspec;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod planar;
pub mod puzzle;
pub mod report;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
