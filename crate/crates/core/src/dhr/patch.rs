//! Folding a feature map into an `n x n` grid of non-overlapping patches and back.

use candle_core::Tensor;

use crate::error::{bail_input, bail_param, Result};
use crate::tensor_ops::{reflect_pad, spatial_mean};

/// Patch-partitioned features.
///
/// `data` has shape `(B * n * n, C, Hp / n, Wp / n)` where `(Hp, Wp)` is the
/// reflect-padded size. Patches are ordered batch-major, then row, then column.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub data: Tensor,
    pub grid_n: usize,
    pub orig_shape: (usize, usize, usize, usize),
    /// Rows and columns of reflection padding added at the bottom and right.
    pub pad: (usize, usize),
}

impl PatchGrid {
    pub fn patch_count(&self) -> usize {
        self.orig_shape.0 * self.grid_n * self.grid_n
    }

    pub fn patch_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.orig_shape;
        ((h + self.pad.0) / self.grid_n, (w + self.pad.1) / self.grid_n)
    }

    /// Same grid metadata with new patch contents (channel count may differ).
    pub fn with_data(&self, data: Tensor) -> Result<PatchGrid> {
        let (n, c, ph, pw) = data.dims4()?;
        if n != self.patch_count() || (ph, pw) != self.patch_size() {
            bail_input!(
                "patch data {:?} does not fit a {}x{} grid of {:?} patches",
                data.dims(),
                self.grid_n,
                self.grid_n,
                self.patch_size()
            );
        }
        let (b, _, h, w) = self.orig_shape;
        Ok(PatchGrid {
            data,
            grid_n: self.grid_n,
            orig_shape: (b, c, h, w),
            pad: self.pad,
        })
    }

    pub fn map(&self, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<PatchGrid> {
        self.with_data(f(&self.data)?)
    }
}

pub fn partition(x: &Tensor, n: usize) -> Result<PatchGrid> {
    if n == 0 {
        bail_param!("grid size must be >= 1");
    }
    let (b, c, h, w) = x.dims4()?;
    let pad_h = h.div_ceil(n) * n - h;
    let pad_w = w.div_ceil(n) * n - w;
    let padded = if pad_h + pad_w > 0 {
        reflect_pad(x, 0, pad_h, 0, pad_w)?
    } else {
        x.clone()
    };
    let (ph, pw) = ((h + pad_h) / n, (w + pad_w) / n);
    let data = if n == 1 {
        padded
    } else {
        padded
            .reshape((b, c, n, ph, n, pw))?
            .permute([0, 2, 4, 1, 3, 5])?
            .reshape((b * n * n, c, ph, pw))?
    };
    Ok(PatchGrid {
        data,
        grid_n: n,
        orig_shape: (b, c, h, w),
        pad: (pad_h, pad_w),
    })
}

pub fn reassemble(g: &PatchGrid) -> Result<Tensor> {
    let n = g.grid_n;
    let (b, c, h, w) = g.orig_shape;
    if n == 0 {
        bail_input!("corrupted patch grid: grid size 0");
    }
    if (h + g.pad.0) % n != 0 || (w + g.pad.1) % n != 0 {
        bail_input!(
            "corrupted patch grid: padded size {}x{} not divisible by {n}",
            h + g.pad.0,
            w + g.pad.1
        );
    }
    let (ph, pw) = g.patch_size();
    if g.data.dims() != [b * n * n, c, ph, pw] {
        bail_input!(
            "corrupted patch grid: data {:?} inconsistent with metadata (B={b}, C={c}, n={n}, patch {ph}x{pw})",
            g.data.dims()
        );
    }
    let full = if n == 1 {
        g.data.clone()
    } else {
        g.data
            .reshape((b, n, n, c, ph, pw))?
            .permute([0, 3, 1, 4, 2, 5])?
            .reshape((b, c, n * ph, n * pw))?
    };
    if g.pad == (0, 0) {
        Ok(full)
    } else {
        Ok(full.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

/// Per-patch spatial mean, `(B * n * n, C)`.
pub fn patch_average_pool(g: &PatchGrid) -> Result<Tensor> {
    spatial_mean(&g.data)
}
