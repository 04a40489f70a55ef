//! Paired dataset access, training crops, augmentation sampling, and a
//! procedural micro-dataset.

pub mod micro;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::Rgb32FImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazegen::{AhgModel, AlphaRange, HazeSynthesisSpec};
use crate::image_io::{image_to_tensor, load_rgb32f};
use crate::losses::{GENERATED_NEGATIVE_WEIGHT, REAL_NEGATIVE_WEIGHT};
use crate::noise::PerlinParams;

pub use micro::{asm_haze, generate_micro_dataset, MicroDatasetOptions};

/// `root/hazy/*.png` paired by file name with `root/clear/*.png`.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    root: PathBuf,
    names: Vec<String>,
}

/// Sorted file names of the PNG images directly inside `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::DatasetIntegrity(format!("missing directory {}", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Names present in both directories. A PNG found on only one side is an
/// integrity error listing every such file.
pub fn matched_png_names(a: &Path, b: &Path) -> Result<Vec<String>> {
    let left = png_names(a)?;
    let right = png_names(b)?;
    let mut unmatched: Vec<String> = left
        .iter()
        .filter(|n| right.binary_search(n).is_err())
        .map(|n| a.join(n).display().to_string())
        .collect();
    unmatched.extend(
        right
            .iter()
            .filter(|n| left.binary_search(n).is_err())
            .map(|n| b.join(n).display().to_string()),
    );
    if !unmatched.is_empty() {
        return Err(Error::DatasetIntegrity(format!("unmatched files: {}", unmatched.join(", "))));
    }
    Ok(left)
}

impl PairedDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["hazy", "clear"] {
            let dir = root.join(sub);
            if !dir.is_dir() {
                return Err(Error::DatasetIntegrity(format!("missing directory {}", dir.display())));
            }
        }
        let names = png_names(&root.join("hazy"))?;
        if names.is_empty() {
            return Err(Error::DatasetIntegrity(format!(
                "no PNG files in {}",
                root.join("hazy").display()
            )));
        }
        let missing: Vec<&String> = names.iter().filter(|n| !root.join("clear").join(n).is_file()).collect();
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|n| root.join("hazy").join(n).display().to_string()).collect();
            return Err(Error::DatasetIntegrity(format!(
                "hazy image without clear counterpart: {}",
                list.join(", ")
            )));
        }
        Ok(Self { root, names })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Decoded `(hazy, clear)` images in `[0, 1]`.
    pub fn load_images(&self, index: usize) -> Result<(Rgb32FImage, Rgb32FImage)> {
        let name = self.names.get(index).ok_or_else(|| {
            Error::InvalidInput(format!("pair index {index} out of range for {} pairs", self.len()))
        })?;
        let hazy = load_rgb32f(self.root.join("hazy").join(name))?;
        let clear = load_rgb32f(self.root.join("clear").join(name))?;
        if hazy.dimensions() != clear.dimensions() {
            return Err(Error::DatasetIntegrity(format!(
                "{name}: hazy is {:?} but clear is {:?}",
                hazy.dimensions(),
                clear.dimensions()
            )));
        }
        Ok((hazy, clear))
    }

    /// `(hazy, clear)` as `(1, 3, H, W)` tensors.
    pub fn load_pair(&self, index: usize, device: &Device) -> Result<(Tensor, Tensor)> {
        let (h, c) = self.load_images(index)?;
        Ok((image_to_tensor(&h, device)?, image_to_tensor(&c, device)?))
    }
}

/// Crop sides are multiples of `unit`; the crop is then resized to `output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub unit: u32,
    pub output: u32,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { unit: 256, output: 256 }
    }
}

/// Square crop window `(x, y, side)`.
pub type CropWindow = (u32, u32, u32);

impl CropSpec {
    /// Admissible crop sides for an image of `w x h`.
    pub fn sides(&self, w: u32, h: u32) -> Vec<u32> {
        let m = w.min(h);
        if m < self.unit {
            return vec![m];
        }
        (1..=m / self.unit).map(|k| k * self.unit).collect()
    }

    pub fn sample_window(&self, w: u32, h: u32, rng: &mut impl Rng) -> CropWindow {
        let sides = self.sides(w, h);
        let side = sides[rng.random_range(0..sides.len())];
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        (x, y, side)
    }
}

pub fn crop_resize(img: &Rgb32FImage, window: CropWindow, output: u32) -> Rgb32FImage {
    let (x, y, side) = window;
    let cropped = imageops::crop_imm(img, x, y, side, side).to_image();
    if side == output {
        cropped
    } else {
        imageops::resize(&cropped, output, output, FilterType::Triangle)
    }
}

/// Applies one random crop window to both images and resizes bilinearly.
pub fn random_crop_resize(
    hazy: &Rgb32FImage,
    clear: &Rgb32FImage,
    spec: &CropSpec,
    rng: &mut impl Rng,
) -> Result<(Rgb32FImage, Rgb32FImage, CropWindow)> {
    if hazy.dimensions() != clear.dimensions() {
        return Err(Error::InvalidInput(format!(
            "pair sizes differ: {:?} vs {:?}",
            hazy.dimensions(),
            clear.dimensions()
        )));
    }
    let (w, h) = hazy.dimensions();
    if w.min(h) < spec.unit {
        log::warn!("{w}x{h} image is smaller than the {} crop unit; upsampling", spec.unit);
    }
    let window = spec.sample_window(w, h, rng);
    Ok((
        crop_resize(hazy, window, spec.output),
        crop_resize(clear, window, spec.output),
        window,
    ))
}

/// Probability of replacing the real hazy input by a generated one, decaying
/// linearly from `p_start` at the first epoch to `p_end` at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSchedule {
    pub p_start: f64,
    pub p_end: f64,
}

impl Default for AugmentSchedule {
    fn default() -> Self {
        Self { p_start: 0.5, p_end: 0.1 }
    }
}

impl AugmentSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_end && self.p_end <= self.p_start && self.p_start <= 1.0) {
            return Err(Error::Config(format!(
                "augmentation schedule needs 0 <= p_end <= p_start <= 1, got {} and {}",
                self.p_start, self.p_end
            )));
        }
        Ok(())
    }

    pub fn probability(&self, epoch: usize, total_epochs: usize) -> f64 {
        if total_epochs <= 1 {
            return self.p_start;
        }
        let t = (epoch.min(total_epochs - 1)) as f64 / (total_epochs - 1) as f64;
        self.p_start * (1.0 - t) + self.p_end * t
    }
}

/// The Bernoulli draw deciding whether a sample is generated.
pub fn draw_generated(p: f64, rng: &mut impl Rng) -> bool {
    rng.random_bool(p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    pub crop: CropSpec,
    pub schedule: AugmentSchedule,
    /// Total negatives per item: the real hazy image plus generated ones.
    pub negatives: usize,
    pub alpha_range: AlphaRange,
    pub perlin: PerlinParams,
    pub modulation: bool,
    pub real_negative_weight: f64,
    pub generated_negative_weight: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            crop: CropSpec::default(),
            schedule: AugmentSchedule::default(),
            negatives: 10,
            alpha_range: AlphaRange::Unit,
            perlin: PerlinParams::default(),
            modulation: true,
            real_negative_weight: REAL_NEGATIVE_WEIGHT,
            generated_negative_weight: GENERATED_NEGATIVE_WEIGHT,
        }
    }
}

/// One training example with its contrastive negatives.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub input: Tensor,
    pub target: Tensor,
    pub negatives: Vec<Tensor>,
    pub weights: Vec<f64>,
    pub generated: bool,
}

fn synth_spec(opts: &SamplingOptions, rng: &mut impl Rng) -> HazeSynthesisSpec {
    HazeSynthesisSpec {
        alpha: opts.alpha_range.sample(rng),
        perlin: opts.perlin.with_seed(rng.random()),
        enable_modulation: opts.modulation,
        modulation_range: crate::noise::DEFAULT_MODULATION_RANGE,
    }
}

/// Loads and crops pair `index`, then, with probability `p(epoch)`, swaps the
/// hazy input for a generated view. Without a haze model no generated inputs
/// or negatives are produced and the only negative is the real hazy image.
#[allow(clippy::too_many_arguments)]
pub fn sample_training_item(
    epoch: usize,
    total_epochs: usize,
    dataset: &PairedDataset,
    index: usize,
    ahg: Option<&AhgModel>,
    opts: &SamplingOptions,
    rng: &mut impl Rng,
    device: &Device,
) -> Result<TrainingItem> {
    let (hazy, clear) = dataset.load_images(index)?;
    let (hazy, clear, _) = random_crop_resize(&hazy, &clear, &opts.crop, rng)?;
    let hazy = image_to_tensor(&hazy, device)?;
    let clear = image_to_tensor(&clear, device)?;

    let mut negatives = vec![hazy.clone()];
    let mut weights = vec![opts.real_negative_weight];
    let Some(ahg) = ahg else {
        return Ok(TrainingItem {
            input: hazy,
            target: clear,
            negatives,
            weights,
            generated: false,
        });
    };

    let p = opts.schedule.probability(epoch, total_epochs);
    let generated = draw_generated(p, rng);
    let (m_c, m_h) = ahg.encode(&clear, &hazy)?;
    let input = if generated {
        ahg.synthesize(&clear, &m_c, &m_h, &synth_spec(opts, rng))?
    } else {
        hazy.clone()
    };
    for _ in 1..opts.negatives.max(1) {
        negatives.push(ahg.synthesize(&clear, &m_c, &m_h, &synth_spec(opts, rng))?.detach());
        weights.push(opts.generated_negative_weight);
    }
    Ok(TrainingItem {
        input: input.detach(),
        target: clear,
        negatives,
        weights,
        generated,
    })
}
