//! Differentiable (MS-)SSIM on NCHW tensors with a separable Gaussian window.

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{Tensor, D};

use crate::error::{bail_input, Result};

pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest value a per-scale term is clamped to before exponentiation.
const TERM_FLOOR: f64 = 1e-12;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Number of scales usable for an `h x w` image, at most `max_scales`.
pub fn usable_scales(h: usize, w: usize, max_scales: usize) -> usize {
    let mut side = h.min(w);
    let mut n = 0;
    while n < max_scales && side >= WINDOW_SIZE {
        n += 1;
        side /= 2;
    }
    n
}

fn blur(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = Tensor::new(gaussian_window(WINDOW_SIZE, WINDOW_SIGMA), x.device())?.to_dtype(x.dtype())?;
    let flat = x.reshape((b * c, 1, h, w))?;
    let y = flat.conv2d(&g.reshape((1, 1, 1, WINDOW_SIZE))?, 0, 1, 1, 1)?;
    let y = y.conv2d(&g.reshape((1, 1, WINDOW_SIZE, 1))?, 0, 1, 1, 1)?;
    let (_, _, oh, ow) = y.dims4()?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Per-(image, channel) mean luminance and contrast-structure terms, each `(B, C)`.
pub fn ssim_terms(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (blur(&x.sqr()?)? - &mu_xx)?;
    let s_yy = (blur(&y.sqr()?)? - &mu_yy)?;
    let s_xy = (blur(&(x * y)?)? - &mu_xy)?;
    let cs = (s_xy.affine(2.0, c2)? / (s_xx + s_yy)?.affine(1.0, c2)?)?;
    let lum = (mu_xy.affine(2.0, c1)? / (mu_xx + mu_yy)?.affine(1.0, c1)?)?;
    let ssim_map = (lum * &cs)?;
    Ok((
        ssim_map.flatten_from(2)?.mean(D::Minus1)?,
        cs.flatten_from(2)?.mean(D::Minus1)?,
    ))
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    if x.dims() != y.dims() {
        bail_input!("ms-ssim: shapes {:?} and {:?} differ", x.dims(), y.dims());
    }
    if h.min(w) < WINDOW_SIZE {
        bail_input!("ms-ssim needs images of at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {h}x{w}");
    }
    Ok((h, w))
}

fn halve(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    // Crop to even size so the pooled gradient maps back exactly.
    let x = x.narrow(2, 0, h / 2 * 2)?.narrow(3, 0, w / 2 * 2)?;
    Ok(x.avg_pool2d(2)?)
}

static WARNED_FEW_SCALES: AtomicBool = AtomicBool::new(false);

/// Scalar MS-SSIM averaged over batch and channels. Images too small for five
/// scales use as many as fit, with the leading weights renormalized.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (h, w) = check_pair(x, y)?;
    let scales = usable_scales(h, w, MS_SSIM_WEIGHTS.len());
    if scales < MS_SSIM_WEIGHTS.len() && !WARNED_FEW_SCALES.swap(true, Ordering::Relaxed) {
        log::warn!("ms-ssim: {h}x{w} input supports only {scales} of {} scales", MS_SSIM_WEIGHTS.len());
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();

    let (mut x, mut y) = (x.clone(), y.clone());
    let mut product: Option<Tensor> = None;
    for (i, &wgt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y)?;
        let term = if i + 1 == scales { ssim } else { cs };
        let factor = term.maximum(TERM_FLOOR)?.powf(wgt / total)?;
        product = Some(match product {
            None => factor,
            Some(p) => (p * factor)?,
        });
        if i + 1 < scales {
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    Ok(product.expect("at least one scale").mean_all()?)
}

/// Single-scale SSIM averaged over batch and channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair(x, y)?;
    Ok(ssim_terms(x, y)?.0.mean_all()?)
}
