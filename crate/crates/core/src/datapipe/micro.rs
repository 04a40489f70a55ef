//! Procedural clear scenes with synthetic depth, hazed with the atmospheric
//! scattering model. Small enough to train on in tests.

use std::path::Path;

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PairedDataset;
use crate::error::{bail_param, Error, Result};
use crate::image_io::quantize_rgb8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroDatasetOptions {
    pub pairs: usize,
    pub size: u32,
    pub seed: u64,
    pub beta_range: (f64, f64),
}

impl Default for MicroDatasetOptions {
    fn default() -> Self {
        Self {
            pairs: 8,
            size: 128,
            seed: 0,
            beta_range: (0.8, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroPairMeta {
    pub name: String,
    pub beta: f64,
    pub airlight: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroMeta {
    pub seed: u64,
    pub size: u32,
    pub pairs: Vec<MicroPairMeta>,
}

/// `clear * t + airlight * (1 - t)` with `t = exp(-beta * depth)` per pixel.
pub fn asm_haze(clear: &Rgb32FImage, depth: &[f64], beta: f64, airlight: [f64; 3]) -> Rgb32FImage {
    let w = clear.width();
    Rgb32FImage::from_fn(w, clear.height(), |x, y| {
        let t = (-beta * depth[(y * w + x) as usize]).exp();
        let p = clear.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| (p[c] as f64 * t + airlight[c] * (1.0 - t)) as f32))
    })
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

/// A clear scene and its normalized depth (`0` near, `1` far).
pub fn render_scene(size: u32, rng: &mut ChaCha8Rng) -> (Rgb32FImage, Vec<f64>) {
    let s = size as f64;
    let horizon = rng.random_range(0.3..0.6) * s;
    let sky_top = color(rng, 0.4, 0.8);
    let sky_low = color(rng, 0.6, 0.95);
    let ground = color(rng, 0.1, 0.5);
    let (fx, fy) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));

    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(3..7) {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.2 * s..s));
        let half = rng.random_range(0.05..0.2) * s;
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                x0: cx - half,
                y0: cy - half * rng.random_range(0.5..2.0),
                x1: cx + half,
                y1: cy + half,
            }
        } else {
            Shape::Disc { cx, cy, r: half }
        };
        let checker = rng.random_bool(0.4).then(|| rng.random_range(3.0..9.0));
        shapes.push((shape, color(rng, 0.05, 0.95), rng.random_range(0.15f64..0.85), checker));
    }
    // Far shapes first so nearer ones occlude them.
    shapes.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut depth = vec![0.0; (size * size) as usize];
    let img = Rgb32FImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let (mut rgb, mut d) = if yf < horizon {
            let t = yf / horizon;
            ([0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_low[c] * t), 1.0)
        } else {
            let t = (yf - horizon) / (s - horizon);
            let tex = 0.08 * (fx * xf + fy * yf).sin();
            (ground.map(|g| (g + tex).clamp(0.0, 1.0)), 0.95 - 0.8 * t)
        };
        for (shape, col, sd, checker) in &shapes {
            if shape.contains(xf, yf) {
                let k = match checker {
                    Some(p) if ((xf / p).floor() + (yf / p).floor()) as i64 % 2 == 0 => 0.6,
                    _ => 1.0,
                };
                rgb = col.map(|c| c * k);
                d = *sd;
            }
        }
        depth[(y * size + x) as usize] = d;
        Rgb(rgb.map(|v| v as f32))
    });
    (img, depth)
}

/// Writes `pairs` clear/hazy PNG pairs plus `meta.json` under `out_dir`.
pub fn generate_micro_dataset(out_dir: impl AsRef<Path>, opts: &MicroDatasetOptions) -> Result<PairedDataset> {
    let out = out_dir.as_ref();
    if opts.pairs == 0 {
        bail_param!("micro dataset needs at least one pair");
    }
    if opts.size < 16 {
        bail_param!("micro dataset images must be at least 16 pixels, got {}", opts.size);
    }
    let (blo, bhi) = opts.beta_range;
    if !(0.0 <= blo && blo <= bhi) {
        bail_param!("invalid beta range ({blo}, {bhi})");
    }
    for sub in ["hazy", "clear"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut meta = MicroMeta {
        seed: opts.seed,
        size: opts.size,
        pairs: Vec::with_capacity(opts.pairs),
    };
    for i in 0..opts.pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let (clear, depth) = render_scene(opts.size, &mut rng);
        let beta = if blo == bhi { blo } else { rng.random_range(blo..bhi) };
        let a: f64 = rng.random_range(0.75..0.95);
        let airlight = [0; 3].map(|_| (a + rng.random_range(-0.04..0.04)).min(1.0));
        let hazy = asm_haze(&clear, &depth, beta, airlight);
        let name = format!("{i:04}.png");
        for (sub, img) in [("clear", &clear), ("hazy", &hazy)] {
            let path = out.join(sub).join(&name);
            quantize_rgb8(img).save(&path).map_err(|e| Error::image(&path, e))?;
        }
        meta.pairs.push(MicroPairMeta { name, beta, airlight });
    }
    let meta_path = out.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    PairedDataset::open(out)
}
