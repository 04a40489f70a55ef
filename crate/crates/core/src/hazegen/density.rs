use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};
use crate::noise::{normalize_field, perlin_distribution, NoiseField, PerlinParams, DEFAULT_MODULATION_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensitySource {
    EncodedFromClear,
    EncodedFromHazy,
    Blended,
    Modulated,
}

/// Single-channel haze density, `(B, 1, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DensityMap {
    pub values: Tensor,
    pub source: DensitySource,
}

impl DensityMap {
    pub fn new(values: Tensor, source: DensitySource) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 1 {
            bail_input!("density map must have one channel, got {c}");
        }
        Ok(Self { values, source })
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    pub fn mean(&self) -> Result<f64> {
        crate::tensor_ops::scalar_f64(&self.values.mean_all()?)
    }
}

/// Range α is drawn from when sampling synthetic haze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaRange {
    /// `[0, 1]`: pure interpolation between the two encoded maps.
    #[default]
    Unit,
    /// `[-0.2, 0.3]`: biased toward and slightly beyond the hazy map.
    Extended,
}

impl AlphaRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            AlphaRange::Unit => (0.0, 1.0),
            AlphaRange::Extended => (-0.2, 0.3),
        }
    }

    pub fn sample(self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.bounds();
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeSynthesisSpec {
    pub alpha: f64,
    pub perlin: PerlinParams,
    pub enable_modulation: bool,
    /// Range the raw Perlin distribution is rescaled to before multiplying the density.
    pub modulation_range: (f64, f64),
}

impl HazeSynthesisSpec {
    pub fn new(alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            perlin: PerlinParams::default().with_seed(seed),
            enable_modulation: true,
            modulation_range: DEFAULT_MODULATION_RANGE,
        }
    }

    pub fn without_modulation(mut self) -> Self {
        self.enable_modulation = false;
        self
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        bail_input!("{what}: shape {:?} does not match {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// `alpha * m_c + (1 - alpha) * m_h`, clamped to `[0, 1]` when alpha leaves the unit interval.
pub fn blend_density(m_c: &DensityMap, m_h: &DensityMap, alpha: f64) -> Result<DensityMap> {
    check_same(&m_c.values, &m_h.values, "blend_density")?;
    let mixed = (m_c.values.affine(alpha, 0.0)? + m_h.values.affine(1.0 - alpha, 0.0)?)?;
    let values = if (0.0..=1.0).contains(&alpha) {
        mixed
    } else {
        mixed.clamp(0.0, 1.0)?
    };
    DensityMap::new(values, DensitySource::Blended)
}

/// Noise field as a `(1, 1, H, W)` tensor.
pub fn field_tensor(field: &NoiseField, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (field.height(), field.width());
    let data: Vec<f64> = field.values.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Elementwise product with a (normalized) noise field, clamped to `[0, 1]`.
pub fn modulate_density(m: &DensityMap, field: &NoiseField) -> Result<DensityMap> {
    let (h, w) = m.spatial();
    if (field.height(), field.width()) != (h, w) {
        bail_input!(
            "modulate_density: field is {}x{}, density map is {h}x{w}",
            field.height(),
            field.width()
        );
    }
    let f = field_tensor(field, m.values.dtype(), m.values.device())?;
    let values = m.values.broadcast_mul(&f)?.clamp(0.0, 1.0)?;
    DensityMap::new(values, DensitySource::Modulated)
}

/// Blends the two encoded maps and, if enabled, modulates the result with a
/// normalized Perlin distribution of matching size.
pub fn resample_density(m_c: &DensityMap, m_h: &DensityMap, spec: &HazeSynthesisSpec) -> Result<DensityMap> {
    let blended = blend_density(m_c, m_h, spec.alpha)?;
    if !spec.enable_modulation {
        return Ok(blended);
    }
    let (h, w) = blended.spatial();
    let (lo, hi) = spec.modulation_range;
    let field = normalize_field(&perlin_distribution(h, w, spec.perlin)?, lo, hi)?;
    modulate_density(&blended, &field)
}
