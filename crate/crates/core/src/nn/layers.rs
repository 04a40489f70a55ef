use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::params::zeros;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, bias: bool, vb: VarBuilder) -> Result<Self> {
        let weight = zeros(&vb, &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], "weight")?;
        let bias = if bias {
            Some(zeros(&vb, &[spec.out_ch], "bias")?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = &self.spec;
        let span = s.dilation * (s.kernel - 1) + 1;
        let f = |n: usize| (n + 2 * s.padding - span) / s.stride + 1;
        (f(h), f(w))
    }

    /// Multiply-accumulates for one image of spatial size `h x w` (bias adds excluded).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        let s = &self.spec;
        (s.in_ch * s.out_ch * s.kernel * s.kernel * oh * ow) as u64
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let s = &self.spec;
        let y = x.conv2d(&self.weight, s.padding, s.stride, s.dilation, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, s.out_ch, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; `output_padding` is chosen so that stride 2 exactly doubles the size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(spec: ConvSpec, output_padding: usize, bias: bool, vb: VarBuilder) -> Result<Self> {
        let weight = zeros(&vb, &[spec.in_ch, spec.out_ch, spec.kernel, spec.kernel], "weight")?;
        let bias = if bias {
            Some(zeros(&vb, &[spec.out_ch], "bias")?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            output_padding,
        })
    }

    /// 4x4 kernel, stride 2, padding 1.
    pub fn up4(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Self> {
        Self::new(ConvSpec::new(in_ch, out_ch, 4).stride(2).padding(1), 0, true, vb)
    }

    /// 3x3 kernel, stride 2, padding 1, output padding 1.
    pub fn up3(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Self> {
        Self::new(ConvSpec::new(in_ch, out_ch, 3).stride(2).padding(1), 1, true, vb)
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = &self.spec;
        let f = |n: usize| {
            (n - 1) * s.stride + s.dilation * (s.kernel - 1) + 1 + self.output_padding - 2 * s.padding
        };
        (f(h), f(w))
    }

    /// Every input pixel scatters a `k x k x out_ch` block.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let s = &self.spec;
        (s.in_ch * s.out_ch * s.kernel * s.kernel * h * w) as u64
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let s = &self.spec;
        let y = x.conv_transpose2d(
            &self.weight,
            s.padding,
            self.output_padding,
            s.stride,
            s.dilation,
        )?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, s.out_ch, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, vb: VarBuilder) -> Result<Self> {
        let weight = zeros(&vb, &[out_dim, in_dim], "weight")?;
        let bias = if bias {
            Some(zeros(&vb, &[out_dim], "bias")?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (self.in_dim * self.out_dim * rows) as u64
    }
}

impl Module for Linear {
    /// `x` is `(rows, in_dim)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}
