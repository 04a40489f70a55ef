pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod dhr;
pub mod error;
pub mod hazegen;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod tensor_ops;
pub mod train;

pub use error::{Error, Result};
