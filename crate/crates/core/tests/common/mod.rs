//! Test oracles shared by the integration and acceptance suites: seeded
//! inputs, finite-difference gradient checks, and naive sliding-window
//! (MS-)SSIM written directly from the definition.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use hazekit::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[lo, hi)` from a seeded generator, as an f64 tensor.
pub fn seeded_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// `x` plus seeded noise, clamped to `[0, 1]`: a correlated partner image.
pub fn noisy_copy(x: &Tensor, seed: u64, amp: f64) -> Tensor {
    let noise = seeded_uniform(x.dims(), seed, -amp, amp);
    (x + noise).unwrap().clamp(0.0, 1.0).unwrap()
}

/// Overwrites every variable with seeded values in `[-scale, scale)`.
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    for (i, (_, var)) in store.named_vars().into_iter().enumerate() {
        let t = seeded_uniform(var.dims(), seed + i as u64, -scale, scale);
        var.set(&t.to_dtype(var.dtype()).unwrap()).unwrap();
    }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// `|fd - an| / max(|fd|, |an|, floor)`; the floor keeps exact zeros comparable.
pub fn relative_error(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// Floor for [`relative_error`]: components a thousand times smaller than the
/// largest gradient are compared against that scale, where finite-difference
/// roundoff would otherwise dominate.
pub fn error_floor(analytic: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-3 * scale).max(1e-12)
}

/// Worst relative error between central differences with step `h` and the
/// analytic gradient, over every element of every variable in `store`.
pub fn param_gradient_error(store: &ParamStore, h: f64, loss: impl Fn() -> Tensor) -> (f64, String) {
    let grads = loss().backward().unwrap();
    let vars = store.named_vars();
    let all: Vec<Vec<f64>> = vars
        .iter()
        .map(|(_, var)| match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        })
        .collect();
    let floor = error_floor(&all.concat());
    let mut worst = (0.0, String::new());
    for ((name, var), analytic) in vars.into_iter().zip(all) {
        let base = values(var.as_tensor());
        for (i, &an) in analytic.iter().enumerate() {
            let eval_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
                scalar(&loss())
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let err = relative_error(fd, an, floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] fd={fd:e} analytic={an:e}"));
            }
        }
        var.set(&Tensor::from_vec(base, var.dims(), var.device()).unwrap()).unwrap();
    }
    worst
}

/// Same check for the gradient with respect to an input tensor.
pub fn input_gradient_error(x0: &Tensor, h: f64, f: impl Fn(&Tensor) -> Tensor) -> (f64, String) {
    let var = Var::from_tensor(x0).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).unwrap());
    let base = values(x0);
    let floor = error_floor(&analytic);
    let mut worst = (0.0, String::new());
    for (i, &an) in analytic.iter().enumerate() {
        let eval_at = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            scalar(&f(&Tensor::from_vec(v, x0.dims(), x0.device()).unwrap()))
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        let err = relative_error(fd, an, floor);
        if err > worst.0 {
            worst = (err, format!("x[{i}] fd={fd:e} analytic={an:e}"));
        }
    }
    worst
}

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized 11x11 Gaussian window built directly in two dimensions.
fn window_2d() -> Vec<f64> {
    let c = (WIN as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(WIN * WIN);
    for i in 0..WIN {
        for j in 0..WIN {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * SIGMA * SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure of one plane, one window position at a time.
pub fn naive_ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let win = window_2d();
    let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0usize);
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let at = |i: usize, j: usize| (y + i) * w + x + j;
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = win[i * WIN + j];
                    mu_a += k * a[at(i, j)];
                    mu_b += k * b[at(i, j)];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = win[i * WIN + j];
                    let (da, db) = (a[at(i, j)] - mu_a, b[at(i, j)] - mu_b);
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            let cs = (2.0 * cov + C2) / (var_a + var_b + C2);
            let lum = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
            ssim_sum += lum * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (ssim_sum / count as f64, cs_sum / count as f64)
}

/// 2x2 mean pooling, dropping a trailing odd row or column.
fn pool_half(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let s = p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1];
            out[y * ow + x] = s / 4.0;
        }
    }
    (out, oh, ow)
}

fn planes(t: &Tensor) -> (Vec<Vec<f64>>, usize, usize) {
    let (b, c, h, w) = t.dims4().unwrap();
    let v = values(t);
    ((0..b * c).map(|i| v[i * h * w..(i + 1) * h * w].to_vec()).collect(), h, w)
}

/// Single-scale SSIM averaged over batch and channels.
pub fn naive_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let (px, h, w) = planes(x);
    let (py, _, _) = planes(y);
    px.iter().zip(&py).map(|(a, b)| naive_ssim_plane(a, b, h, w).0).sum::<f64>() / px.len() as f64
}

/// MS-SSIM per plane: contrast-structure at every scale but the last, full
/// SSIM at the last, with weights renormalized over the scales that fit.
pub fn naive_ms_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let (px, h0, w0) = planes(x);
    let (py, _, _) = planes(y);
    let mut scales = 0;
    let mut side = h0.min(w0);
    while scales < MS_WEIGHTS.len() && side >= WIN {
        scales += 1;
        side /= 2;
    }
    let total: f64 = MS_WEIGHTS[..scales].iter().sum();
    let mut acc = 0.0;
    for (a0, b0) in px.iter().zip(&py) {
        let (mut a, mut b, mut h, mut w) = (a0.clone(), b0.clone(), h0, w0);
        let mut prod = 1.0;
        for (s, wgt) in MS_WEIGHTS[..scales].iter().enumerate() {
            let (ssim, cs) = naive_ssim_plane(&a, &b, h, w);
            let term = if s + 1 == scales { ssim } else { cs };
            prod *= term.max(1e-12).powf(wgt / total);
            let (na, nh, nw) = pool_half(&a, h, w);
            let (nb, _, _) = pool_half(&b, h, w);
            (a, b, h, w) = (na, nb, nh, nw);
        }
        acc += prod;
    }
    acc / px.len() as f64
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unit gradient at lattice node `(ix, iy)`: one of 16 directions `k * pi / 8`
/// picked by the top four bits of a splitmix hash of the node and octave key.
fn node_gradient(key: u64, ix: i64, iy: i64) -> (f64, f64) {
    let h = mix64(key ^ mix64((ix as u64) ^ mix64(iy as u64).rotate_left(17)));
    let angle = (h >> 60) as f64 * std::f64::consts::PI / 8.0;
    (angle.cos(), angle.sin())
}

/// Gradient noise as a sum of four corner surflets, each the dot product with
/// its gradient times the tensor product of quintic weights.
fn reference_noise(key: u64, x: f64, y: f64) -> f64 {
    let quintic = |t: f64| 6.0 * t.powi(5) - 15.0 * t.powi(4) + 10.0 * t.powi(3);
    let (x0, y0) = (x.floor(), y.floor());
    let mut sum = 0.0;
    for (cx, cy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let (dx, dy) = (x - x0 - cx, y - y0 - cy);
        let (gx, gy) = node_gradient(key, (x0 + cx) as i64, (y0 + cy) as i64);
        let wx = if cx == 0.0 { 1.0 - quintic(dx) } else { quintic(1.0 + dx) };
        let wy = if cy == 0.0 { 1.0 - quintic(dy) } else { quintic(1.0 + dy) };
        sum += wx * wy * (gx * dx + gy * dy);
    }
    sum
}

/// Octave sum `sum_i w_i N_i(k^i x + u_i, k^i y + v_i)` with `w_i = p^i / sum_j p^j`
/// and offsets drawn from stream `i` of a ChaCha8 generator seeded with `seed`.
pub fn reference_perlin(h: usize, w: usize, octaves: usize, p: f64, k: f64, cell: usize, seed: u64) -> Vec<f64> {
    let norm: f64 = (0..octaves).map(|i| p.powi(i as i32)).sum();
    let mut out = vec![0.0; h * w];
    for i in 0..octaves {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let u = rng.random::<f64>() * cell as f64;
        let v = rng.random::<f64>() * cell as f64;
        let key = mix64(seed ^ mix64((i as u64).wrapping_add(0x5eed)));
        let (weight, freq) = (p.powi(i as i32) / norm, k.powi(i as i32));
        for y in 0..h {
            for x in 0..w {
                let sx = (freq * x as f64 + u) / cell as f64;
                let sy = (freq * y as f64 + v) / cell as f64;
                out[y * w + x] += weight * reference_noise(key, sx, sy);
            }
        }
    }
    out
}
