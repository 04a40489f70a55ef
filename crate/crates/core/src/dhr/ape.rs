//! Adaptive patch enhancement: every patch runs through a small encoder/decoder;
//! skip and bottleneck features are put back in image layout and refined by an
//! [`AprBlock`] before the decoder consumes them.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::apr::AprBlock;
use super::blocks::{AttentionBlock, DilatedBlock};
use super::patch::{partition, reassemble, PatchGrid};
use crate::error::Result;
use crate::nn::layers::{Conv2d, ConvSpec, ConvTranspose2d};
use crate::tensor_ops::pad_to_multiple;

/// Number of stride-2 stages in the per-patch encoder.
pub const APE_DEPTH: usize = 2;

#[derive(Debug, Clone)]
pub struct ApeBlock {
    enc1: Conv2d,
    enc2: Conv2d,
    skip0: AprBlock,
    skip1: AprBlock,
    bottleneck: AprBlock,
    up2: ConvTranspose2d,
    att1: AttentionBlock,
    up1: ConvTranspose2d,
    att0: AttentionBlock,
    dilated: DilatedBlock,
}

/// Encoder features before any patch reversal, all in patch-batch layout.
pub struct PatchEncoding {
    pub input: PatchGrid,
    pub half: PatchGrid,
    pub quarter: PatchGrid,
}

fn subgrid(template: &PatchGrid, data: Tensor, factor: usize) -> Result<PatchGrid> {
    let (b, _, h, w) = template.orig_shape;
    let (_, c, _, _) = data.dims4()?;
    let padded = (h + template.pad.0, w + template.pad.1);
    Ok(PatchGrid {
        data,
        grid_n: template.grid_n,
        orig_shape: (b, c, padded.0 / factor, padded.1 / factor),
        pad: (0, 0),
    })
}

impl ApeBlock {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let down = |name: &str| Conv2d::new(ConvSpec::new(channels, channels, 3).stride(2), true, vb.pp(name));
        Ok(Self {
            enc1: down("enc1")?,
            enc2: down("enc2")?,
            skip0: AprBlock::new(channels, reduction, vb.pp("skip0"))?,
            skip1: AprBlock::new(channels, reduction, vb.pp("skip1"))?,
            bottleneck: AprBlock::new(channels, reduction, vb.pp("bottleneck"))?,
            up2: ConvTranspose2d::up4(channels, channels, vb.pp("up2"))?,
            att1: AttentionBlock::new(channels, reduction, vb.pp("att1"))?,
            up1: ConvTranspose2d::up4(channels, channels, vb.pp("up1"))?,
            att0: AttentionBlock::new(channels, reduction, vb.pp("att0"))?,
            dilated: DilatedBlock::new(channels, reduction, vb.pp("dilated"))?,
        })
    }

    /// Spatial sizes must be multiples of `4 n`; other sizes are reflect-padded.
    pub fn alignment(grid_n: usize) -> usize {
        grid_n << APE_DEPTH
    }

    /// Partition and run the per-patch encoder. Patches never see each other here.
    pub fn encode_patches(&self, x: &Tensor, grid_n: usize) -> Result<PatchEncoding> {
        let input = partition(x, grid_n)?;
        let e1 = self.enc1.forward(&input.data)?.relu()?;
        let e2 = self.enc2.forward(&e1)?.relu()?;
        Ok(PatchEncoding {
            half: subgrid(&input, e1, 2)?,
            quarter: subgrid(&input, e2, 4)?,
            input,
        })
    }

    pub fn forward(&self, x: &Tensor, grid_n: usize) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (xp, pads) = pad_to_multiple(x, Self::alignment(grid_n))?;
        let enc = self.encode_patches(&xp, grid_n)?;

        let b = self.bottleneck.forward(&enc.quarter)?;
        let s1 = self.skip1.forward(&enc.half)?;
        let s0 = self.skip0.forward(&enc.input)?;

        let d1 = (self.up2.forward(&b.data)?.relu()? + &s1.data)?;
        let d1 = self.att1.forward(&d1)?;
        let d0 = (self.up1.forward(&d1)?.relu()? + &s0.data)?;
        let d0 = self.att0.forward(&d0)?;

        let full = reassemble(&enc.input.with_data(d0)?)?;
        let out = self.dilated.forward(&full)?;
        if pads == (0, 0) {
            Ok(out)
        } else {
            Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
        }
    }

    pub fn macs(&self, h: usize, w: usize, grid_n: usize) -> u64 {
        let a = Self::alignment(grid_n);
        let (h, w) = (h.div_ceil(a) * a, w.div_ceil(a) * a);
        let patches = grid_n * grid_n;
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h / 4, w / 4);
        self.enc1.macs(h, w)
            + self.enc2.macs(h1, w1)
            + self.skip0.macs(h, w, patches)
            + self.skip1.macs(h1, w1, patches)
            + self.bottleneck.macs(h2, w2, patches)
            + self.up2.macs(h2, w2)
            + self.att1.macs(h1, w1)
            + self.up1.macs(h1, w1)
            + self.att0.macs(h, w)
            + self.dilated.macs(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, IndexOp};

    fn block(channels: usize) -> (ParamStore, ApeBlock) {
        let store = ParamStore::new(DType::F32, &Device::Cpu);
        let ape = ApeBlock::new(channels, 8, store.builder().pp("ape")).unwrap();
        store.init_seeded(11).unwrap();
        (store, ape)
    }

    #[test]
    fn output_shape_matches_input() {
        let (_, ape) = block(32);
        let x = Tensor::randn(0f32, 1.0, (1, 32, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(ape.forward(&x, 2).unwrap().dims(), x.dims());
        let odd = Tensor::randn(0f32, 1.0, (1, 32, 30, 22), &Device::Cpu).unwrap();
        assert_eq!(ape.forward(&odd, 2).unwrap().dims(), odd.dims());
    }

    #[test]
    fn encoder_is_patch_local() {
        let dev = Device::Cpu;
        let (_, ape) = block(12);
        let x = Tensor::randn(0f32, 1.0, (1, 12, 16, 16), &dev).unwrap();
        // Zero the bottom-left patch (tile row 1, column 0 of a 2x2 grid).
        let mask = Tensor::ones((1, 12, 16, 16), DType::F32, &dev).unwrap();
        let zero_rows = Tensor::zeros((1, 12, 8, 8), DType::F32, &dev).unwrap();
        let keep_rows = Tensor::ones((1, 12, 8, 8), DType::F32, &dev).unwrap();
        let bottom = Tensor::cat(&[&zero_rows, &keep_rows], 3).unwrap();
        let top = mask.narrow(2, 0, 8).unwrap();
        let mask = Tensor::cat(&[&top, &bottom], 2).unwrap();
        let xz = (&x * &mask).unwrap();

        let a = ape.encode_patches(&x, 2).unwrap();
        let b = ape.encode_patches(&xz, 2).unwrap();
        for p in 0..4 {
            let da = a.quarter.data.i(p).unwrap();
            let db = b.quarter.data.i(p).unwrap();
            let diff = (da - db).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            if p == 2 {
                assert!(diff > 0.0);
            } else {
                assert_eq!(diff, 0.0, "patch {p} changed");
            }
        }
    }
}
