//! Dehazing network: a three-level U-Net whose outermost encoder and decoder
//! stages run adaptive patch enhancement.

pub mod ape;
pub mod apr;
pub mod blocks;
pub mod net;
pub mod patch;

pub use ape::ApeBlock;
pub use apr::{frequency_branch, AprBlock, AprOutput};
pub use blocks::{dilated_branch_widths, AttentionBlock, ChannelGate, DilatedBlock};
pub use net::{DhrConfig, DhrModel};
pub use patch::{partition, patch_average_pool, reassemble, PatchGrid};
