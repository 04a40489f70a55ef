use candle_core::{DType, Device, Module, Tensor};
use candle_nn::ops::sigmoid;
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::ape::ApeBlock;
use super::blocks::{AttentionBlock, DilatedBlock};
use crate::error::{bail_param, Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec, ConvTranspose2d};
use crate::nn::ParamStore;
use crate::tensor_ops::{all_finite, pad_to_multiple};

/// Number of stride-2 stages in the backbone.
pub const DHR_STAGES: usize = 3;

/// Inputs are mapped into logit space for the global residual; this keeps
/// saturated pixels finite.
const LOGIT_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DhrConfig {
    /// Patch side in input pixels; the grid is `ceil(max(H, W) / patch_size)` tiles per side.
    pub patch_size: usize,
    pub base_width: usize,
    /// Width multipliers for the full, 1/2, 1/4 and 1/8 resolution levels.
    pub width_mults: [usize; 4],
    pub reduction: usize,
    /// Without APE both enhancement sites fall back to a plain attention block.
    pub use_ape: bool,
}

impl Default for DhrConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            base_width: 64,
            width_mults: [1, 2, 4, 6],
            reduction: 8,
            use_ape: true,
        }
    }
}

impl DhrConfig {
    pub fn widths(&self) -> [usize; 4] {
        self.width_mults.map(|m| m * self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            bail_param!("patch_size must be >= 1");
        }
        if self.reduction == 0 {
            bail_param!("reduction must be >= 1");
        }
        if let Some(w) = self.widths().iter().find(|&&w| w < 10) {
            return Err(Error::Config(format!(
                "every stage needs at least 10 channels for the dilated block, got {w}"
            )));
        }
        Ok(())
    }

    pub fn grid_n(&self, h: usize, w: usize) -> usize {
        h.max(w).div_ceil(self.patch_size).max(1)
    }

    /// Spatial multiple the padded input must reach for a `grid_n` grid.
    pub fn alignment(grid_n: usize) -> usize {
        grid_n << DHR_STAGES
    }
}

#[derive(Debug, Clone)]
enum Enhance {
    Ape(ApeBlock),
    Attention(AttentionBlock),
}

impl Enhance {
    fn new(use_ape: bool, channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        Ok(if use_ape {
            Enhance::Ape(ApeBlock::new(channels, reduction, vb.pp("ape"))?)
        } else {
            Enhance::Attention(AttentionBlock::new(channels, reduction, vb.pp("att"))?)
        })
    }

    fn forward(&self, x: &Tensor, grid_n: usize) -> Result<Tensor> {
        match self {
            Enhance::Ape(b) => b.forward(x, grid_n),
            Enhance::Attention(b) => b.forward(x),
        }
    }

    fn macs(&self, h: usize, w: usize, grid_n: usize) -> u64 {
        match self {
            Enhance::Ape(b) => b.macs(h, w, grid_n),
            Enhance::Attention(b) => b.macs(h, w),
        }
    }
}

#[derive(Debug, Clone)]
struct Down {
    conv: Conv2d,
    dilated: DilatedBlock,
}

impl Down {
    fn new(cin: usize, cout: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(cin, cout, 3).stride(2), true, vb.pp("conv"))?,
            dilated: DilatedBlock::new(cout, reduction, vb.pp("dilated"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.dilated.forward(&self.conv.forward(x)?.relu()?)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.conv.out_size(h, w);
        self.conv.macs(h, w) + self.dilated.macs(oh, ow)
    }
}

#[derive(Debug, Clone)]
struct Up {
    conv: ConvTranspose2d,
    dilated: DilatedBlock,
}

impl Up {
    fn new(cin: usize, cout: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: ConvTranspose2d::up4(cin, cout, vb.pp("conv"))?,
            dilated: DilatedBlock::new(cout, reduction, vb.pp("dilated"))?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = (self.conv.forward(x)?.relu()? + skip)?;
        self.dilated.forward(&up)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w) + self.dilated.macs(2 * h, 2 * w)
    }
}

/// The dehazing network together with the parameter store that owns its weights.
#[derive(Debug, Clone)]
pub struct DhrModel {
    config: DhrConfig,
    store: ParamStore,
    head: Conv2d,
    down1: Down,
    enhance_in: Enhance,
    down2: Down,
    att2: AttentionBlock,
    down3: Down,
    att3: AttentionBlock,
    up3: Up,
    att_up3: AttentionBlock,
    up2: Up,
    att_up2: AttentionBlock,
    up1: Up,
    enhance_out: Enhance,
    tail: Conv2d,
}

impl DhrModel {
    /// Builds the network with deterministic initial weights derived from `seed`.
    pub fn new(config: DhrConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, device);
        let vb = store.builder();
        let [c0, c1, c2, c3] = config.widths();
        let r = config.reduction;
        let model = Self {
            head: Conv2d::new(ConvSpec::new(3, c0, 3), true, vb.pp("head"))?,
            down1: Down::new(c0, c1, r, vb.pp("down1"))?,
            enhance_in: Enhance::new(config.use_ape, c1, r, vb.pp("enhance_in"))?,
            down2: Down::new(c1, c2, r, vb.pp("down2"))?,
            att2: AttentionBlock::new(c2, r, vb.pp("att2"))?,
            down3: Down::new(c2, c3, r, vb.pp("down3"))?,
            att3: AttentionBlock::new(c3, r, vb.pp("att3"))?,
            up3: Up::new(c3, c2, r, vb.pp("up3"))?,
            att_up3: AttentionBlock::new(c2, r, vb.pp("att_up3"))?,
            up2: Up::new(c2, c1, r, vb.pp("up2"))?,
            att_up2: AttentionBlock::new(c1, r, vb.pp("att_up2"))?,
            up1: Up::new(c1, c0, r, vb.pp("up1"))?,
            enhance_out: Enhance::new(config.use_ape, c0, r, vb.pp("enhance_out"))?,
            tail: Conv2d::new(ConvSpec::new(c0, 3, 3), true, vb.pp("tail"))?,
            config,
            store,
        };
        model.store.init_seeded(seed)?;
        Ok(model)
    }

    pub fn config(&self) -> &DhrConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.param_count()
    }

    /// Analytic multiply-accumulate count for one `h x w` image, including padding.
    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        let n = self.config.grid_n(h, w);
        let a = DhrConfig::alignment(n);
        let (h, w) = (h.div_ceil(a) * a, w.div_ceil(a) * a);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h / 4, w / 4);
        let (h3, w3) = (h / 8, w / 8);
        self.head.macs(h, w)
            + self.down1.macs(h, w)
            + self.enhance_in.macs(h1, w1, n)
            + self.down2.macs(h1, w1)
            + self.att2.macs(h2, w2)
            + self.down3.macs(h2, w2)
            + self.att3.macs(h3, w3)
            + self.up3.macs(h3, w3)
            + self.att_up3.macs(h2, w2)
            + self.up2.macs(h2, w2)
            + self.att_up2.macs(h1, w1)
            + self.up1.macs(h1, w1)
            + self.enhance_out.macs(h, w, n)
            + self.tail.macs(h, w)
    }

    /// Dehazes a `(B, 3, H, W)` batch with values in `[0, 1]`.
    pub fn forward(&self, hazy: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = hazy.dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        let n = self.config.grid_n(h, w);
        let (x, pads) = pad_to_multiple(hazy, DhrConfig::alignment(n))?;

        let f0 = self.head.forward(&x)?.relu()?;
        let e1 = self.enhance_in.forward(&self.down1.forward(&f0)?, n)?;
        let e2 = self.att2.forward(&self.down2.forward(&e1)?)?;
        let e3 = self.att3.forward(&self.down3.forward(&e2)?)?;
        let d2 = self.att_up3.forward(&self.up3.forward(&e3, &e2)?)?;
        let d1 = self.att_up2.forward(&self.up2.forward(&d2, &e1)?)?;
        let d0 = self.enhance_out.forward(&self.up1.forward(&d1, &f0)?, n)?;

        // Residual prediction in logit space: a zero tail leaves the input unchanged.
        let xc = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)?;
        let logit = (xc.log()? - xc.affine(-1.0, 1.0)?.log()?)?;
        let out = sigmoid(&(self.tail.forward(&d0)? + logit)?)?;
        let out = if pads == (0, 0) {
            out
        } else {
            out.narrow(2, 0, h)?.narrow(3, 0, w)?
        };
        if !all_finite(&out)? {
            return Err(Error::NonFinite("dehazing network produced non-finite output".into()));
        }
        Ok(out)
    }
}
