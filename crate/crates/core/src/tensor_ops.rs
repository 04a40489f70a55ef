//! Shape helpers shared by the networks and losses.

use candle_core::{Device, Tensor};

use crate::error::{bail_input, Result};

/// Source index for position `i` of a reflect-padded axis of length `len`.
fn reflect_index(i: isize, len: usize) -> u32 {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as u32
}

fn reflect_indices(before: usize, len: usize, after: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (-(before as isize)..(len + after) as isize)
        .map(|i| reflect_index(i, len))
        .collect();
    Ok(Tensor::new(idx, device)?)
}

/// Reflection padding (edge pixel not repeated) of the last two dims of an NCHW tensor.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut y = x.clone();
    if top + bottom > 0 {
        y = y.index_select(&reflect_indices(top, h, bottom, x.device())?, 2)?;
    }
    if left + right > 0 {
        y = y.index_select(&reflect_indices(left, w, right, x.device())?, 3)?;
    }
    Ok(y)
}

/// Reflect-pads bottom/right so that height and width become multiples of `multiple`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    if multiple == 0 {
        bail_input!("padding multiple must be positive");
    }
    let (_, _, h, w) = x.dims4()?;
    let ph = h.div_ceil(multiple) * multiple - h;
    let pw = w.div_ceil(multiple) * multiple - w;
    Ok((reflect_pad(x, 0, ph, 0, pw)?, (ph, pw)))
}

/// Mean over the spatial dims of an NCHW tensor, giving `(N, C)`.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// 2x2 max pooling that drops a trailing odd row or column. Built from
/// reshapes and reductions because the fused kernel's backward pass scales
/// the gradient by the window area instead of splitting it across ties.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = x.narrow(2, 0, oh * 2)?.narrow(3, 0, ow * 2)?;
    Ok(x.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn reflect_matches_numpy_convention() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 4.0, &dev).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let y = reflect_pad(&x, 0, 0, 2, 3).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![2., 1., 0., 1., 2., 3., 2., 1., 0.]
        );
        let z = reflect_pad(&x, 0, 0, 0, 9).unwrap();
        assert_eq!(
            z.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![0., 1., 2., 3., 2., 1., 0., 1., 2., 3., 2., 1., 0.]
        );
    }

    #[test]
    fn pad_to_multiple_records_amounts() {
        let x = Tensor::zeros((1, 2, 10, 13), DType::F32, &Device::Cpu).unwrap();
        let (y, pads) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(pads, (6, 3));
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
    }

    #[test]
    fn max_pool_matches_kernel_and_routes_full_gradient() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f64, 1.0, (1, 2, 6, 7), &dev).unwrap();
        let fused = x.narrow(3, 0, 6).unwrap().max_pool2d(2).unwrap();
        let ours = max_pool_2x2(&x).unwrap();
        assert_eq!(
            ours.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            fused.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let v = candle_core::Var::from_tensor(&x).unwrap();
        let g = max_pool_2x2(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g.iter().sum::<f64>(), 18.0);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
