//! PNG reading and writing between `image` buffers and `(1, 3, H, W)` tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, Rgb32FImage, RgbImage};

use crate::error::{bail_input, Error, Result};

/// Decodes any supported image as RGB in `[0, 1]`; 16-bit sources keep full precision.
pub fn load_rgb32f(path: impl AsRef<Path>) -> Result<Rgb32FImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb32f())
}

pub fn image_to_tensor(img: &Rgb32FImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let hwc = Tensor::from_vec(img.as_raw().clone(), (h, w, 3), device)?;
    Ok(hwc.permute((2, 0, 1))?.contiguous()?.unsqueeze(0)?)
}

/// First image of an NCHW batch (or a CHW tensor) as an RGB float image.
pub fn tensor_to_image(t: &Tensor) -> Result<Rgb32FImage> {
    let t = if t.rank() == 4 { t.get(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        bail_input!("expected a 3-channel image, got {c} channels");
    }
    let data = t
        .to_dtype(DType::F32)?
        .permute((1, 2, 0))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Rgb32FImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))
}

pub fn load_rgb(path: impl AsRef<Path>, device: &Device) -> Result<Tensor> {
    image_to_tensor(&load_rgb32f(path)?, device)
}

pub fn quantize_rgb8(img: &Rgb32FImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes the first image of a batch as an 8-bit PNG.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    quantize_rgb8(&tensor_to_image(t)?)
        .save(path)
        .map_err(|e| Error::image(path, e))
}
