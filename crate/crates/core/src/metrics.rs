//! Full-reference image quality metrics, computed in double precision.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};
use crate::losses::msssim::{gaussian_window, K1, K2, WINDOW_SIGMA, WINDOW_SIZE};

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        bail_input!("psnr: shapes {:?} and {:?} differ", pred.dims(), target.dims());
    }
    let (p, t) = (values(pred)?, values(target)?);
    let mse = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, _, _) = filter_valid(a, h, w, g);
    let (mu_b, _, _) = filter_valid(b, h, w, g);
    let (e_aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, g);
    let (e_bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, g);
    let (e_ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (va, vb, cov) = (e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Gaussian-window SSIM, computed per channel and averaged over channels and batch.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.dims() != target.dims() {
        bail_input!("ssim: shapes {:?} and {:?} differ", pred.dims(), target.dims());
    }
    let (b, c, h, w) = pred.dims4()?;
    if h < WINDOW_SIZE || w < WINDOW_SIZE {
        bail_input!("ssim needs at least {WINDOW_SIZE}x{WINDOW_SIZE} pixels, got {h}x{w}");
    }
    let g = gaussian_window(WINDOW_SIZE, WINDOW_SIGMA);
    let (p, t) = (values(pred)?, values(target)?);
    let plane = h * w;
    let total: f64 = (0..b * c)
        .map(|i| ssim_plane(&p[i * plane..(i + 1) * plane], &t[i * plane..(i + 1) * plane], h, w, &g))
        .sum();
    Ok(total / (b * c) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, pred: &Tensor, target: &Tensor) -> Result<()> {
        self.rows.push(EvalRow {
            name: name.into(),
            psnr: psnr(pred, target, 1.0)?,
            ssim: ssim(pred, target)?,
        });
        Ok(())
    }

    pub fn summary(&self) -> EvalSummary {
        let n = self.rows.len();
        let mean = |f: fn(&EvalRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalSummary {
            count: n,
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
        }
    }

    /// `name,psnr,ssim` rows with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{:?}\n", r.name, r.psnr, r.ssim));
        }
        out
    }
}
