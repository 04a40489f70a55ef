//! Frozen feature extractors for the contrastive term.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::fft::fft2;
use crate::tensor_ops::max_pool_2x2;

/// Maps an image batch to a list of feature maps; weights never receive gradients.
pub trait FeatureExtractor {
    fn spatial_features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Orthonormally scaled 2-D spectrum, real and imaginary parts in a trailing dim.
pub fn frequency_features(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let hw = (dims[dims.len() - 2] * dims[dims.len() - 1]) as f64;
    Ok((fft2(x)? / hw.sqrt())?)
}

#[derive(Debug, Clone)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
}

impl FrozenConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, 1, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?.relu()?)
    }
}

/// Stages of 3x3 conv + ReLU; every stage after the first starts with 2x2 max pooling.
#[derive(Debug, Clone)]
struct ConvStages {
    stages: Vec<Vec<FrozenConv>>,
}

impl ConvStages {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = x.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                y = max_pool_2x2(&y)?;
            }
            for conv in stage {
                y = conv.forward(&y)?;
            }
            taps.push(y.clone());
        }
        Ok(taps)
    }
}

/// Small fixed-seed random network, for hermetic tests and quick runs.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    net: ConvStages,
}

impl RandomConvExtractor {
    pub fn new(widths: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for &cout in widths {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
            stages.push(vec![FrozenConv {
                weight: Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::from_vec(b, cout, device)?.to_dtype(dtype)?,
            }]);
            cin = cout;
        }
        Ok(Self {
            net: ConvStages { stages },
        })
    }

    pub fn default_for(dtype: DType, device: &Device) -> Result<Self> {
        Self::new(&[8, 16, 32], 0x5eed, dtype, device)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn spatial_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.net.forward(x)
    }
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// First three stages of VGG-16 (through `relu3_3`), taking features after each stage.
///
/// Weights are read from a safetensors file using the torchvision layout
/// (`features.{0,2,5,7,10,12,14}.{weight,bias}`).
#[derive(Debug, Clone)]
pub struct Vgg16Extractor {
    net: ConvStages,
    mean: Tensor,
    std: Tensor,
}

impl Vgg16Extractor {
    pub const LAYERS: [&'static [usize]; 3] = [&[0, 2], &[5, 7], &[10, 12, 14]];

    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Checkpoint(format!("cannot read VGG weights {}: {e}", path.display())))?;
        let get = |name: String| -> Result<Tensor> {
            tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor `{name}`", path.display())))?
                .to_dtype(dtype)
                .map_err(Error::from)
        };
        let stages = Self::LAYERS
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|i| {
                        Ok(FrozenConv {
                            weight: get(format!("features.{i}.weight"))?,
                            bias: get(format!("features.{i}.bias"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net: ConvStages { stages },
            mean: Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?,
            std: Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?,
        })
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn spatial_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        self.net.forward(&x)
    }
}
