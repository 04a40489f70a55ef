use candle_core::{DType, Device, Module, Tensor};
use candle_nn::ops::sigmoid;
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::density::{resample_density, DensityMap, DensitySource, HazeSynthesisSpec};
use crate::error::{bail_input, bail_param, Result};
use crate::nn::layers::{Conv2d, ConvSpec, ConvTranspose2d};
use crate::nn::{AdamConfig, ParamStore};
use crate::tensor_ops::pad_to_multiple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AhgConfig {
    /// Channels at full resolution in the encoder and decoder U-Nets.
    pub base_width: usize,
    pub disc_width: usize,
    /// Weight on the clear-image reconstruction term.
    pub lambda_clear: f64,
    /// Weight on the adversarial term.
    pub lambda_adv: f64,
    pub optimizer: AdamConfig,
}

impl Default for AhgConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            disc_width: 64,
            lambda_clear: 1.0,
            lambda_adv: 0.1,
            optimizer: AdamConfig {
                lr: 2e-4,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ConvSpec::new(c, c, 3), true, vb.pp("conv1"))?,
            conv2: Conv2d::new(ConvSpec::new(c, c, 3), true, vb.pp("conv2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.conv2.forward(&self.conv1.forward(x)?.relu()?)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: [ResBlock; 2],
}

impl Stage {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            blocks: [ResBlock::new(c, vb.pp("res1"))?, ResBlock::new(c, vb.pp("res2"))?],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.blocks[0].forward(x)?;
        self.blocks[1].forward(&x)
    }
}

/// Two stride-2 downsamplings and two transposed-conv upsamplings, each
/// followed by two residual blocks, with additive skips.
#[derive(Debug, Clone)]
pub struct ResUnet {
    head: Conv2d,
    down1: Conv2d,
    stage_d1: Stage,
    down2: Conv2d,
    stage_d2: Stage,
    up2: ConvTranspose2d,
    stage_u2: Stage,
    up1: ConvTranspose2d,
    stage_u1: Stage,
    tail: Conv2d,
}

impl ResUnet {
    pub fn new(in_ch: usize, out_ch: usize, width: usize, vb: VarBuilder) -> Result<Self> {
        let (c0, c1, c2) = (width, 2 * width, 4 * width);
        Ok(Self {
            head: Conv2d::new(ConvSpec::new(in_ch, c0, 3), true, vb.pp("head"))?,
            down1: Conv2d::new(ConvSpec::new(c0, c1, 3).stride(2), true, vb.pp("down1"))?,
            stage_d1: Stage::new(c1, vb.pp("stage_d1"))?,
            down2: Conv2d::new(ConvSpec::new(c1, c2, 3).stride(2), true, vb.pp("down2"))?,
            stage_d2: Stage::new(c2, vb.pp("stage_d2"))?,
            up2: ConvTranspose2d::up3(c2, c1, vb.pp("up2"))?,
            stage_u2: Stage::new(c1, vb.pp("stage_u2"))?,
            up1: ConvTranspose2d::up3(c1, c0, vb.pp("up1"))?,
            stage_u1: Stage::new(c0, vb.pp("stage_u1"))?,
            tail: Conv2d::new(ConvSpec::new(c0, out_ch, 3), true, vb.pp("tail"))?,
        })
    }

    /// Raw (pre-activation) output with the same spatial size as `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (x, _) = pad_to_multiple(x, 4)?;
        let f0 = self.head.forward(&x)?.relu()?;
        let f1 = self.stage_d1.forward(&self.down1.forward(&f0)?.relu()?)?;
        let f2 = self.stage_d2.forward(&self.down2.forward(&f1)?.relu()?)?;
        let u1 = self.stage_u2.forward(&(self.up2.forward(&f2)?.relu()? + f1)?)?;
        let u0 = self.stage_u1.forward(&(self.up1.forward(&u1)?.relu()? + f0)?)?;
        let out = self.tail.forward(&u0)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

/// Least-squares patch discriminator: three stride-2 and two stride-1 4x4 convs.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(width: usize, vb: VarBuilder) -> Result<Self> {
        let chans = [3, width, 2 * width, 4 * width, 8 * width, 1];
        let convs = (0..5)
            .map(|i| {
                let stride = if i < 3 { 2 } else { 1 };
                let spec = ConvSpec::new(chans[i], chans[i + 1], 4).stride(stride).padding(1);
                Conv2d::new(spec, true, vb.pp(format!("conv{}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i + 1 < self.convs.len() {
                y = candle_nn::ops::leaky_relu(&y, 0.2)?;
            }
        }
        Ok(y)
    }
}

/// Haze generator: density encoder, image decoder and the adversarial critic.
///
/// The decoder predicts a per-pixel airlight colour `A` and composes
/// `(1 - M) * clear + M * A`, so a zero density reproduces the clear input and
/// the output always stays in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct AhgModel {
    config: AhgConfig,
    generator: ParamStore,
    critic: ParamStore,
    encoder: ResUnet,
    decoder: ResUnet,
    discriminator: PatchDiscriminator,
}

fn check_image(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        bail_input!("{what}: expected 3 channels, got {c}");
    }
    Ok((b, h, w))
}

impl AhgModel {
    pub fn new(config: AhgConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        if config.base_width == 0 || config.disc_width == 0 {
            bail_param!("network widths must be positive");
        }
        let generator = ParamStore::new(dtype, device);
        let critic = ParamStore::new(dtype, device);
        let vb = generator.builder();
        let encoder = ResUnet::new(6, 2, config.base_width, vb.pp("encoder"))?;
        let decoder = ResUnet::new(4, 3, config.base_width, vb.pp("decoder"))?;
        let discriminator = PatchDiscriminator::new(config.disc_width, critic.builder().pp("disc"))?;
        generator.init_seeded(seed)?;
        critic.init_seeded(seed.wrapping_add(1))?;
        Ok(Self {
            config,
            generator,
            critic,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn config(&self) -> &AhgConfig {
        &self.config
    }

    /// Encoder and decoder weights.
    pub fn generator_params(&self) -> &ParamStore {
        &self.generator
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic
    }

    /// Density maps `(M_c, M_h)` for a clear/hazy pair.
    pub fn encode(&self, clear: &Tensor, hazy: &Tensor) -> Result<(DensityMap, DensityMap)> {
        let shape = check_image(clear, "encode")?;
        if check_image(hazy, "encode")? != shape {
            bail_input!("encode: clear {:?} and hazy {:?} differ in shape", clear.dims(), hazy.dims());
        }
        let maps = sigmoid(&self.encoder.forward(&Tensor::cat(&[clear, hazy], 1)?)?)?;
        Ok((
            DensityMap::new(maps.narrow(1, 0, 1)?, DensitySource::EncodedFromClear)?,
            DensityMap::new(maps.narrow(1, 1, 1)?, DensitySource::EncodedFromHazy)?,
        ))
    }

    pub fn decode(&self, clear: &Tensor, density: &DensityMap) -> Result<Tensor> {
        self.decode_raw(clear, &density.values)
    }

    pub(crate) fn decode_raw(&self, clear: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (b, h, w) = check_image(clear, "decode")?;
        let (mb, mc, mh, mw) = m.dims4()?;
        if mc != 1 || (mb, mh, mw) != (b, h, w) {
            bail_input!("decode: density {:?} does not match image {:?}", m.dims(), clear.dims());
        }
        let airlight = sigmoid(&self.decoder.forward(&Tensor::cat(&[clear, m], 1)?)?)?;
        let keep = m.affine(-1.0, 1.0)?;
        let out = (clear.broadcast_mul(&keep)? + airlight.broadcast_mul(m)?)?;
        Ok(out.clamp(0.0, 1.0)?)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.discriminator.forward(x)
    }

    /// Blend, optionally Perlin-modulate, then decode.
    pub fn synthesize(
        &self,
        clear: &Tensor,
        m_c: &DensityMap,
        m_h: &DensityMap,
        spec: &HazeSynthesisSpec,
    ) -> Result<Tensor> {
        let density = resample_density(m_c, m_h, spec)?;
        self.decode(clear, &density)
    }

    /// Encodes a pair and synthesizes a new hazy view of its clear image.
    pub fn augment(&self, clear: &Tensor, hazy: &Tensor, spec: &HazeSynthesisSpec) -> Result<Tensor> {
        let (m_c, m_h) = self.encode(clear, hazy)?;
        self.synthesize(clear, &m_c, &m_h, spec)
    }
}
