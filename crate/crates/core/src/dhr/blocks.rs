use candle_core::{Module, Tensor};
use candle_nn::ops::sigmoid;
use candle_nn::VarBuilder;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec, Linear};
use crate::tensor_ops::spatial_mean;

/// Two-layer bottleneck on pooled channel descriptors, `(N, C) -> (N, C)` in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    fc1: Linear,
    fc2: Linear,
    hidden: usize,
}

impl ChannelGate {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            fc1: Linear::new(channels, hidden, true, vb.pp("fc1"))?,
            fc2: Linear::new(hidden, channels, true, vb.pp("fc2"))?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, pooled: &Tensor) -> candle_core::Result<Tensor> {
        sigmoid(&self.fc2.forward(&self.fc1.forward(pooled)?.relu()?)?)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.fc1.macs(rows) + self.fc2.macs(rows)
    }
}

/// Conv + ReLU, then channel attention and pixel attention, with a residual
/// connection back to the activated convolution output.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    conv: Conv2d,
    channel: ChannelGate,
    pixel1: Conv2d,
    pixel2: Conv2d,
}

/// Intermediate values of one [`AttentionBlock`] pass.
pub struct AttentionParts {
    pub activated: Tensor,
    pub channel_scale: Tensor,
    pub pixel_scale: Tensor,
    pub output: Tensor,
}

impl AttentionBlock {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(channels, channels, 3), true, vb.pp("conv"))?,
            channel: ChannelGate::new(channels, reduction, vb.pp("ca"))?,
            pixel1: Conv2d::new(ConvSpec::new(channels, hidden, 1), true, vb.pp("pa1"))?,
            pixel2: Conv2d::new(ConvSpec::new(hidden, 1, 1), true, vb.pp("pa2"))?,
        })
    }

    pub fn forward_parts(&self, x: &Tensor) -> Result<AttentionParts> {
        let activated = self.conv.forward(x)?.relu()?;
        let (n, c, _, _) = activated.dims4()?;
        let channel_scale = self.channel.forward(&spatial_mean(&activated)?)?;
        let y = activated.broadcast_mul(&channel_scale.reshape((n, c, 1, 1))?)?;
        let pixel_scale = sigmoid(&self.pixel2.forward(&self.pixel1.forward(&y)?.relu()?)?)?;
        let z = y.broadcast_mul(&pixel_scale)?;
        let output = (&activated + z)?;
        Ok(AttentionParts {
            activated,
            channel_scale,
            pixel_scale,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(x)?.output)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w) + self.channel.macs(1) + self.pixel1.macs(h, w) + self.pixel2.macs(h, w)
    }
}

/// Output widths of the four dilated branches for `n` input channels.
pub fn dilated_branch_widths(n: usize) -> Result<[usize; 4]> {
    if n < 10 {
        return Err(Error::Config(format!(
            "dilated block needs at least 10 channels, got {n}"
        )));
    }
    let q = n / 10;
    Ok([n - 3 * q, q, q, q])
}

/// Four parallel 3x3 convolutions with dilation 1..=4, concatenated and fused by attention.
#[derive(Debug, Clone)]
pub struct DilatedBlock {
    branches: Vec<Conv2d>,
    fuse: AttentionBlock,
}

impl DilatedBlock {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let widths = dilated_branch_widths(channels)?;
        let branches = widths
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let spec = ConvSpec::new(channels, out, 3).dilation(i + 1);
                Conv2d::new(spec, true, vb.pp(format!("branch{}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            fuse: AttentionBlock::new(channels, reduction, vb.pp("fuse"))?,
        })
    }

    pub fn branch_widths(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.spec().out_ch).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let cat = Tensor::cat(&outs, 1)?.relu()?;
        self.fuse.forward(&cat)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.macs(h, w)).sum::<u64>() + self.fuse.macs(h, w)
    }
}
