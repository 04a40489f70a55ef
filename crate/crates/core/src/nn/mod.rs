//! Small neural-network toolkit on top of candle: seeded parameter stores,
//! layers that know their own multiply-accumulate cost, FFT ops with
//! gradients, and an Adam optimizer whose state can be checkpointed.

pub mod fft;
pub mod layers;
pub mod optim;
pub mod params;
pub mod schedule;

pub use layers::{Conv2d, ConvTranspose2d, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use schedule::cosine_lr;
