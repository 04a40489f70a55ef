//! Adapted patch residual block: a spatial branch and a frequency branch, each
//! gated by pooled per-patch channel descriptors, merged through a per-patch
//! sigmoid weight that decides how much of the input passes through unchanged.

use candle_core::{Module, Tensor};
use candle_nn::ops::sigmoid;
use candle_nn::VarBuilder;

use super::blocks::ChannelGate;
use super::patch::{partition, patch_average_pool, reassemble, PatchGrid};
use crate::error::{bail_input, Result};
use crate::nn::fft::{fft2, ifft2_real};
use crate::nn::layers::{Conv2d, ConvSpec, Linear};

#[derive(Debug, Clone)]
pub struct AprBlock {
    channels: usize,
    spatial_conv: Conv2d,
    spatial_gate: ChannelGate,
    frequency_gate: ChannelGate,
    fusion: Linear,
}

/// Result of an APR pass together with the per-patch fusion weights `(N, 1)`.
pub struct AprOutput {
    pub grid: PatchGrid,
    pub fusion_weight: Tensor,
}

/// `Re(iFFT(FFT(x) * scale))` with `scale` of shape `(N, C)` applied per channel.
pub fn frequency_branch(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    let spectrum = fft2(x)?;
    let scaled = spectrum.broadcast_mul(&scale.reshape((n, c, 1, 1, 1))?)?;
    Ok(ifft2_real(&scaled)?)
}

impl AprBlock {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            channels,
            spatial_conv: Conv2d::new(ConvSpec::new(channels, channels, 3), true, vb.pp("spatial_conv"))?,
            spatial_gate: ChannelGate::new(channels, reduction, vb.pp("spatial_gate"))?,
            frequency_gate: ChannelGate::new(channels, reduction, vb.pp("frequency_gate"))?,
            fusion: Linear::new(channels, 1, true, vb.pp("fusion"))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, p_in: &PatchGrid) -> Result<PatchGrid> {
        Ok(self.forward_with_weights(p_in)?.grid)
    }

    pub fn forward_with_weights(&self, p_in: &PatchGrid) -> Result<AprOutput> {
        let (n, c, _, _) = p_in.data.dims4()?;
        if c != self.channels {
            bail_input!("APR block expects {} channels, got {c}", self.channels);
        }
        let pooled = patch_average_pool(p_in)?;

        // The convolution runs on the reassembled map so that it sees across patch borders.
        let conv = self.spatial_conv.forward(&reassemble(p_in)?)?;
        let conv = partition(&conv, p_in.grid_n)?.data;
        let spatial_scale = self.spatial_gate.forward(&pooled)?.reshape((n, c, 1, 1))?;
        let p_spa = conv.broadcast_mul(&spatial_scale)?;

        let p_fre = frequency_branch(&p_in.data, &self.frequency_gate.forward(&pooled)?)?;

        let merged = (p_spa + p_fre)?;
        let w = sigmoid(&self.fusion.forward(&crate::tensor_ops::spatial_mean(&merged)?)?)?;
        let w4 = w.reshape((n, 1, 1, 1))?;
        let out = (p_in.data.broadcast_mul(&w4)? + merged.broadcast_mul(&w4.affine(-1.0, 1.0)?)?)?;
        Ok(AprOutput {
            grid: p_in.with_data(out)?,
            fusion_weight: w,
        })
    }

    /// MACs for a feature map of `h x w` split into `patches` patches.
    pub fn macs(&self, h: usize, w: usize, patches: usize) -> u64 {
        self.spatial_conv.macs(h, w)
            + self.spatial_gate.macs(patches)
            + self.frequency_gate.macs(patches)
            + self.fusion.macs(patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn block(channels: usize, seed: u64) -> (ParamStore, AprBlock) {
        let store = ParamStore::new(DType::F64, &Device::Cpu);
        let apr = AprBlock::new(channels, 8, store.builder().pp("apr")).unwrap();
        store.init_seeded(seed).unwrap();
        (store, apr)
    }

    #[test]
    fn zero_fusion_gives_even_split() {
        let dev = Device::Cpu;
        let (store, apr) = block(8, 1);
        for name in ["apr.fusion.weight", "apr.fusion.bias"] {
            let v = store.get(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::randn(0f64, 1.0, (2, 8, 8, 8), &dev).unwrap();
        let g = partition(&x, 2).unwrap();
        let out = apr.forward_with_weights(&g).unwrap();
        let w = out.fusion_weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(w.len(), 8);
        assert!(w.iter().all(|&v| v == 0.5));

        // 0.5 * P_in + 0.5 * (P_spa + P_fre): recover the branch sum and check the split.
        let branches = ((&out.grid.data * 2.0).unwrap() - &g.data).unwrap();
        let recon = ((&g.data * 0.5).unwrap() + (&branches * 0.5).unwrap()).unwrap();
        assert!(max_abs(&(recon - &out.grid.data).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_input_zero_output() {
        let dev = Device::Cpu;
        let (_, apr) = block(8, 2);
        let g = partition(&Tensor::zeros((1, 8, 8, 8), DType::F64, &dev).unwrap(), 2).unwrap();
        assert_eq!(max_abs(&apr.forward(&g).unwrap().data), 0.0);
    }

    #[test]
    fn weights_strictly_inside_unit_interval() {
        let dev = Device::Cpu;
        let (_, apr) = block(16, 3);
        let x = Tensor::randn(0f64, 3.0, (2, 16, 16, 16), &dev).unwrap();
        let out = apr.forward_with_weights(&partition(&x, 4).unwrap()).unwrap();
        assert_eq!(out.grid.data.dims(), &[32, 16, 4, 4]);
        let w = out.fusion_weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn large_fusion_bias_passes_input_through() {
        let dev = Device::Cpu;
        let (store, apr) = block(8, 4);
        let bias = store.get("apr.fusion.bias").unwrap();
        bias.set(&Tensor::full(50.0f64, 1, &dev).unwrap()).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 8, 8, 8), &dev).unwrap();
        let g = partition(&x, 2).unwrap();
        let out = apr.forward(&g).unwrap();
        assert!(max_abs(&(out.data - &g.data).unwrap()) < 1e-3);
    }

    #[test]
    fn frequency_branch_identity_roundtrip() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (4, 6, 8, 8), &dev).unwrap();
        let ones = Tensor::ones((4, 6), DType::F64, &dev).unwrap();
        let y = frequency_branch(&x, &ones).unwrap();
        assert!(max_abs(&(y - &x).unwrap()) <= 1e-5);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let dev = Device::Cpu;
        let (_, apr) = block(8, 5);
        let g = partition(&Tensor::zeros((1, 4, 8, 8), DType::F64, &dev).unwrap(), 2).unwrap();
        assert!(matches!(apr.forward(&g), Err(crate::Error::InvalidInput(_))));
    }
}
