//! Haze generation: density encoding, density resampling and hazy-image decoding.

pub mod density;
pub mod model;
pub mod train;

pub use density::{
    blend_density, field_tensor, modulate_density, resample_density, AlphaRange, DensityMap, DensitySource,
    HazeSynthesisSpec,
};
pub use model::{AhgConfig, AhgModel};
pub use train::{AhgLossRecord, AhgTrainer};
