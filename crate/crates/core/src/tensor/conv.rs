//! Direct convolution kernels over `[batch, channels, time, height, width]`.
//!
//! 3D, per-frame 2D and per-pixel temporal 1D convolutions all run through the
//! same kernel with different geometry. Work is split so that every output
//! element has exactly one writer and a fixed summation order, which keeps
//! results bit-identical across thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// How the temporal axis is padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPadding {
    /// Zero padding on the left only: output frame `t` never reads frames
    /// beyond the end of its own stride window.
    Causal,
    /// Zero padding split across both sides.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
}

impl ConvGeometry {
    /// Spatial axes are always padded symmetrically by `k - 1` in total.
    /// A causal temporal axis gets `k - stride` frames of left padding, so a
    /// stride-1 conv sees frames `t-k+1..=t` and a stride-2 conv sees the
    /// window ending at `2t+1`.
    pub fn new(kernel: [usize; 3], stride: [usize; 3], temporal: TemporalPadding) -> Self {
        let mut pad_before = [0; 3];
        let mut pad_after = [0; 3];
        for axis in 0..3 {
            let total = kernel[axis].saturating_sub(1);
            if axis == 0 && temporal == TemporalPadding::Causal {
                pad_before[0] = kernel[0].saturating_sub(stride[0]);
                pad_after[0] = 0;
            } else {
                pad_before[axis] = total / 2;
                pad_after[axis] = total - total / 2;
            }
        }
        Self {
            kernel,
            stride,
            pad_before,
            pad_after,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            if input[axis] == 0 {
                return Err(Error::Empty("conv"));
            }
            if self.stride[axis] == 0 || self.kernel[axis] == 0 {
                return Err(Error::shape("conv", "kernel and stride must be positive"));
            }
            let padded = input[axis] + self.pad_before[axis] + self.pad_after[axis];
            if self.kernel[axis] > padded {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "kernel extent {} exceeds padded input extent {} on axis {axis}",
                        self.kernel[axis], padded
                    ),
                ));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

/// Output indices `o` in `lo..hi` whose input index `o*stride + tap - pad`
/// falls inside `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let off = tap as i64 - pad as i64;
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = n_in as i64 - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(n_out as i64) };
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.c_in * self.geom.kernel_volume() * self.out_plane()) as u64
    }

    /// Calls `f(out_row_offset, in_row_offset, w_lo, w_hi, in_w_start)` for
    /// every (time, row) pair touched by kernel tap `(dt, dh, dw)`.
    #[inline]
    fn for_each_row(&self, dt: usize, dh: usize, dw: usize, mut f: impl FnMut(usize, usize, usize, usize, isize)) {
        let g = &self.geom;
        let [t_in, h_in, w_in] = self.input;
        let [t_out, h_out, w_out] = self.output;
        let (t_lo, t_hi) = valid_range(t_out, t_in, g.stride[0], dt, g.pad_before[0]);
        let (h_lo, h_hi) = valid_range(h_out, h_in, g.stride[1], dh, g.pad_before[1]);
        let (w_lo, w_hi) = valid_range(w_out, w_in, g.stride[2], dw, g.pad_before[2]);
        if w_lo >= w_hi {
            return;
        }
        let w_start = w_lo as isize * g.stride[2] as isize + dw as isize - g.pad_before[2] as isize;
        for to in t_lo..t_hi {
            let ti = to * g.stride[0] + dt - g.pad_before[0];
            for ho in h_lo..h_hi {
                let hi = ho * g.stride[1] + dh - g.pad_before[1];
                f((to * h_out + ho) * w_out, (ti * h_in + hi) * w_in, w_lo, w_hi, w_start);
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    d: &ConvDims,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let out_plane = d.out_plane();
    let in_plane = d.in_plane();
    let kvol = d.geom.kernel_volume();
    let [kt, kh, kw] = d.geom.kernel;
    let sw = d.geom.stride[2];
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];
    out.par_chunks_mut(out_plane.max(1))
        .enumerate()
        .for_each(|(bc, plane)| {
            let b = bc / d.c_out;
            let co = bc % d.c_out;
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.c_in {
                let src = &input[(b * d.c_in + ci) * in_plane..][..in_plane];
                let wbase = (co * d.c_in + ci) * kvol;
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let w = weight[wbase + (dt * kh + dh) * kw + dw];
                            d.for_each_row(dt, dh, dw, |orow, irow, lo, hi, start| {
                                let dst = &mut plane[orow + lo..orow + hi];
                                let base = irow as isize + start;
                                if sw == 1 {
                                    let s = &src[base as usize..base as usize + dst.len()];
                                    for (o, &x) in dst.iter_mut().zip(s) {
                                        *o += w * x;
                                    }
                                } else {
                                    for (k, o) in dst.iter_mut().enumerate() {
                                        *o += w * src[(base + (k * sw) as isize) as usize];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn backward_input<T: Real>(d: &ConvDims, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let out_plane = d.out_plane();
    let in_plane = d.in_plane();
    let kvol = d.geom.kernel_volume();
    let [kt, kh, kw] = d.geom.kernel;
    let sw = d.geom.stride[2];
    let mut grad_in = vec![T::zero(); d.batch * d.c_in * in_plane];
    grad_in
        .par_chunks_mut(in_plane.max(1))
        .enumerate()
        .for_each(|(bc, plane)| {
            let b = bc / d.c_in;
            let ci = bc % d.c_in;
            for co in 0..d.c_out {
                let g = &grad_out[(b * d.c_out + co) * out_plane..][..out_plane];
                let wbase = (co * d.c_in + ci) * kvol;
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let w = weight[wbase + (dt * kh + dh) * kw + dw];
                            d.for_each_row(dt, dh, dw, |orow, irow, lo, hi, start| {
                                let gs = &g[orow + lo..orow + hi];
                                let base = irow as isize + start;
                                if sw == 1 {
                                    let dst = &mut plane[base as usize..base as usize + gs.len()];
                                    for (x, &go) in dst.iter_mut().zip(gs) {
                                        *x += w * go;
                                    }
                                } else {
                                    for (k, &go) in gs.iter().enumerate() {
                                        plane[(base + (k * sw) as isize) as usize] += w * go;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
    grad_in
}

pub(crate) fn backward_weight<T: Real>(d: &ConvDims, grad_out: &[T], input: &[T]) -> Vec<T> {
    let out_plane = d.out_plane();
    let in_plane = d.in_plane();
    let kvol = d.geom.kernel_volume();
    let [kt, kh, kw] = d.geom.kernel;
    let sw = d.geom.stride[2];
    let mut grad_w = vec![T::zero(); d.c_out * d.c_in * kvol];
    grad_w
        .par_chunks_mut((d.c_in * kvol).max(1))
        .enumerate()
        .for_each(|(co, block)| {
            for ci in 0..d.c_in {
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let mut acc = T::zero();
                            for b in 0..d.batch {
                                let g = &grad_out[(b * d.c_out + co) * out_plane..][..out_plane];
                                let src = &input[(b * d.c_in + ci) * in_plane..][..in_plane];
                                d.for_each_row(dt, dh, dw, |orow, irow, lo, hi, start| {
                                    let gs = &g[orow + lo..orow + hi];
                                    let base = irow as isize + start;
                                    if sw == 1 {
                                        let s = &src[base as usize..base as usize + gs.len()];
                                        for (&go, &x) in gs.iter().zip(s) {
                                            acc += go * x;
                                        }
                                    } else {
                                        for (k, &go) in gs.iter().enumerate() {
                                            acc += go * src[(base + (k * sw) as isize) as usize];
                                        }
                                    }
                                });
                            }
                            block[(ci * kt + dt) * kh * kw + dh * kw + dw] = acc;
                        }
                    }
                }
            }
        });
    grad_w
}

pub(crate) fn backward_bias<T: Real>(d: &ConvDims, grad_out: &[T]) -> Vec<T> {
    let out_plane = d.out_plane();
    (0..d.c_out)
        .map(|co| {
            let mut acc = T::zero();
            for b in 0..d.batch {
                for &g in &grad_out[(b * d.c_out + co) * out_plane..][..out_plane] {
                    acc += g;
                }
            }
            acc
        })
        .collect()
}
