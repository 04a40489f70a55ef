//! Differentiable 2-D discrete Fourier transforms over the last two dimensions.
//!
//! Complex tensors are stored with a trailing dimension of size 2 holding the
//! real and imaginary parts. The forward transform is unnormalized and the
//! inverse carries the `1 / (H W)` factor, matching the usual FFT convention.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Real `(.., H, W)` to complex spectrum `(.., H, W, 2)`.
pub fn fft2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Spectrum)
}

/// Real part of the inverse transform of a complex `(.., H, W, 2)` spectrum.
pub fn ifft2_real(z: &Tensor) -> candle_core::Result<Tensor> {
    z.contiguous()?.apply_op1(InverseReal)
}

struct Spectrum;
struct InverseReal;

impl CustomOp1 for Spectrum {
    fn name(&self) -> &'static str {
        "fft2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() < 2 {
            candle_core::bail!("fft2 expects at least two dimensions, got {dims:?}");
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let mut out_dims = dims.to_vec();
        out_dims.push(2);
        let out = match storage {
            CpuStorage::F32(v) => {
                let v = contiguous_slice(v, layout)?;
                let buf: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r as f64, 0.0)).collect();
                let buf = transform(buf, h, w, false);
                CpuStorage::F32(interleave(&buf).into_iter().map(|x| x as f32).collect())
            }
            CpuStorage::F64(v) => {
                let v = contiguous_slice(v, layout)?;
                let buf: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
                CpuStorage::F64(interleave(&transform(buf, h, w, false)))
            }
            _ => candle_core::bail!("fft2 supports f32 and f64 only"),
        };
        Ok((out, Shape::from(out_dims)))
    }

    // Adjoint of the unnormalized DFT on a real input: Re(DFT(conj(g))) = HW * Re(IDFT(g)).
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims();
        let hw = (dims[dims.len() - 2] * dims[dims.len() - 1]) as f64;
        Ok(Some((ifft2_real(grad_res)? * hw)?))
    }
}

impl CustomOp1 for InverseReal {
    fn name(&self) -> &'static str {
        "ifft2-real"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() < 3 || dims[dims.len() - 1] != 2 {
            candle_core::bail!("ifft2-real expects a (.., H, W, 2) tensor, got {dims:?}");
        }
        let (h, w) = (dims[dims.len() - 3], dims[dims.len() - 2]);
        let out_dims = dims[..dims.len() - 1].to_vec();
        let out = match storage {
            CpuStorage::F32(v) => {
                let v = contiguous_slice(v, layout)?;
                let buf: Vec<Complex64> = v
                    .chunks_exact(2)
                    .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
                    .collect();
                let buf = transform(buf, h, w, true);
                CpuStorage::F32(buf.iter().map(|c| c.re as f32).collect())
            }
            CpuStorage::F64(v) => {
                let v = contiguous_slice(v, layout)?;
                let buf: Vec<Complex64> = v.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
                CpuStorage::F64(transform(buf, h, w, true).iter().map(|c| c.re).collect())
            }
            _ => candle_core::bail!("ifft2-real supports f32 and f64 only"),
        };
        Ok((out, Shape::from(out_dims)))
    }

    // d Re(IDFT(z)) / dz is DFT(g) / HW, split into real and imaginary parts.
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims();
        let hw = (dims[dims.len() - 3] * dims[dims.len() - 2]) as f64;
        Ok(Some((fft2(grad_res)? / hw)?))
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("fft ops require a contiguous input"),
    }
}

fn interleave(buf: &[Complex64]) -> Vec<f64> {
    buf.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// In-place 2-D transform of every consecutive `h x w` plane.
fn transform(mut buf: Vec<Complex64>, h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let plane = h * w;
    if plane == 0 {
        return buf;
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    let scale = if inverse { 1.0 / plane as f64 } else { 1.0 };
    for p in buf.chunks_exact_mut(plane) {
        row_fft.process(p);
        for x in 0..w {
            for y in 0..h {
                column[y] = p[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                p[y * w + x] = column[y] * scale;
            }
        }
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(h * w);
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let theta = -2.0
                            * std::f64::consts::PI
                            * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                        re += x[y * w + xx] * theta.cos();
                        im += x[y * w + xx] * theta.sin();
                    }
                }
                out.push((re, im));
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let dev = Device::Cpu;
        let (h, w) = (5, 6);
        let x = Tensor::randn(0f64, 1.0, (1, 1, h, w), &dev).unwrap();
        let spec = fft2(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, (re, im)) in naive_dft(&xs, h, w).into_iter().enumerate() {
            assert!((spec[2 * i] - re).abs() < 1e-10);
            assert!((spec[2 * i + 1] - im).abs() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_recovers_input() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 12), &dev).unwrap();
        let back = ifft2_real(&fft2(&x).unwrap()).unwrap();
        let err = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-12, "{err}");

        let xf = x.to_dtype(DType::F32).unwrap();
        let back = ifft2_real(&fft2(&xf).unwrap()).unwrap();
        let err = (back - &xf).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn check_gradient(f: impl Fn(&Tensor) -> Tensor, x0: &Tensor) {
        let var = Var::from_tensor(x0).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = f(&Tensor::from_vec(p, x0.dims(), x0.device()).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, x0.dims(), x0.device()).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", g[i]);
        }
    }

    #[test]
    fn spectrum_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 2, 4, 5), &dev).unwrap();
        let weights = Tensor::randn(0f64, 1.0, (1, 2, 4, 5, 2), &dev).unwrap();
        check_gradient(|t| (fft2(t).unwrap() * &weights).unwrap().sum_all().unwrap(), &x);
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let z = Tensor::randn(0f64, 1.0, (1, 1, 3, 4, 2), &dev).unwrap();
        let weights = Tensor::randn(0f64, 1.0, (1, 1, 3, 4), &dev).unwrap();
        check_gradient(|t| (ifft2_real(t).unwrap() * &weights).unwrap().sum_all().unwrap(), &z);
    }
}
