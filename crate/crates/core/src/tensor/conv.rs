//! Direct 2-D convolution (cross-correlation) with zero padding.
//!
//! Summation order, fixed for every output pixel:
//!
//! ```text
//! out = bias
//! for ky in 0..kh:            // kernel rows, top to bottom
//!     for kx in 0..kw:        // kernel columns, left to right
//!         for ci in group:    // input channels of the group, ascending
//!             out += w[co, ci, ky, kx] * x[ci, iy, ix]
//! ```
//!
//! Taps that fall outside the image are skipped (zero padding contributes
//! nothing). The order does not depend on which region of the output is being
//! computed, so any tiling of the output reproduces the whole-image result
//! bit for bit.

use super::{Rect, Result, Shape, Tensor, TensorError, View};

/// Kernel `(out_channels, in_channels / groups, kh, kw)`, per-output bias and
/// geometry of a convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    kernel: Tensor,
    bias: Vec<f32>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvWeights {
    pub fn new(
        kernel: Tensor,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ks = kernel.shape();
        let invalid = |reason: String| TensorError::InvalidArgument {
            op: "conv weights",
            reason,
        };
        if bias.len() != ks.n {
            return Err(TensorError::ShapeMismatch {
                op: "conv weights",
                expected: format!("bias of length {}", ks.n),
                found: format!("bias of length {}", bias.len()),
            });
        }
        if stride == 0 || groups == 0 {
            return Err(invalid(format!(
                "stride ({stride}) and groups ({groups}) must be positive"
            )));
        }
        if ks.h.is_multiple_of(2) || ks.w.is_multiple_of(2) {
            return Err(invalid(format!("kernel {}x{} must be odd", ks.h, ks.w)));
        }
        if !ks.n.is_multiple_of(groups) {
            return Err(invalid(format!(
                "{} output channels not divisible by {groups} groups",
                ks.n
            )));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Stride-1 convolution with "same" zero padding.
    pub fn same(kernel: Tensor, bias: Vec<f32>, groups: usize) -> Result<Self> {
        let pad = (kernel.shape().h - 1) / 2;
        Self::new(kernel, bias, 1, pad, groups)
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    /// Kernel data and bias, borrowed together.
    pub fn parts_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.kernel.data_mut(), &mut self.bias)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape().h, self.kernel.shape().w)
    }

    pub fn is_depthwise(&self) -> bool {
        self.kernel.shape().c == 1 && self.groups == self.out_channels()
    }

    /// Spatial output size for an input of `h x w`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let (p, s) = (self.padding, self.stride);
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("input {h}x{w} smaller than kernel {kh}x{kw} after padding {p}"),
            });
        }
        Ok(((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1))
    }

    /// Input rows (or columns) read by outputs `[o0, o0 + len)` along one
    /// axis of length `extent`, clipped to the image.
    pub fn input_span(&self, o0: usize, len: usize, k: usize, extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = (o0 * s).saturating_sub(p);
        let hi = ((o0 + len - 1) * s + k).saturating_sub(p).min(extent);
        (lo, hi.saturating_sub(lo))
    }

    /// Input rectangle (clipped to a `full` image) that the outputs in
    /// `out` depend on.
    pub fn input_rect(&self, out: Rect, full: (usize, usize)) -> Rect {
        if out.is_empty() {
            return Rect::default();
        }
        let (kh, kw) = self.kernel_size();
        let (y, h) = self.input_span(out.y, out.h, kh, full.0);
        let (x, w) = self.input_span(out.x, out.w, kw, full.1);
        Rect::new(y, x, h, w)
    }
}

/// Whole-image convolution.
pub fn conv2d(input: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = weights.output_size(s.h, s.w)?;
    conv2d_region(View::whole(input), weights, Rect::full(oh, ow))
}

/// Computes the outputs in `out_rect` of a convolution over the image that
/// `input` is a view into. The returned tensor covers exactly `out_rect`.
pub fn conv2d_region(input: View<'_>, weights: &ConvWeights, out_rect: Rect) -> Result<Tensor> {
    let ins = input.data.shape();
    if ins.c != weights.in_channels() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: format!(
                "input with {} channels for kernel {}",
                weights.in_channels(),
                weights.kernel.shape()
            ),
            found: format!("input {ins}"),
        });
    }
    let (full_h, full_w) = input.full;
    let (oh, ow) = weights.output_size(full_h, full_w)?;
    if !Rect::full(oh, ow).contains(&out_rect) {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("output region {out_rect} outside the {oh}x{ow} output"),
        });
    }
    input.require("conv2d", weights.input_rect(out_rect, input.full))?;

    let (kh, kw) = weights.kernel_size();
    let (stride, pad) = (weights.stride, weights.padding);
    let out_c = weights.out_channels();
    let cin_pg = weights.kernel.shape().c;
    let oc_pg = out_c / weights.groups;
    let (oy0, ox0) = (out_rect.y, out_rect.x);
    let (by0, bx0) = input.origin;
    let out_shape = Shape::new(ins.n, out_c, out_rect.h, out_rect.w);
    let mut out = Tensor::zeros(out_shape);
    if out_rect.is_empty() {
        return Ok(out);
    }

    // Output columns whose tap kx lands inside the image, as [lo, hi).
    let col_ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            let lo = pad.saturating_sub(kx).div_ceil(stride);
            let hi = if full_w + pad > kx {
                (full_w + pad - kx - 1) / stride + 1
            } else {
                0
            };
            (lo.max(ox0), hi.min(ox0 + out_rect.w))
        })
        .collect();

    let kernel = weights.kernel.data();
    let mut acc = vec![0.0f32; out_rect.w];
    for b in 0..ins.n {
        for co in 0..out_c {
            let ci0 = (co / oc_pg) * cin_pg;
            let k_base = co * cin_pg * kh * kw;
            for oy in oy0..oy0 + out_rect.h {
                acc.fill(weights.bias[co]);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= full_h {
                        continue;
                    }
                    let by = iy as usize - by0;
                    for (kx, &(lo, hi)) in col_ranges.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let acc_row = &mut acc[lo - ox0..hi - ox0];
                        // First input column read, relative to the buffer.
                        let start = lo * stride + kx - pad - bx0;
                        for ci in 0..cin_pg {
                            let w = kernel[k_base + (ci * kh + ky) * kw + kx];
                            let plane = input.data.plane(b, ci0 + ci);
                            let row = &plane[by * ins.w..(by + 1) * ins.w];
                            if stride == 1 {
                                for (a, &v) in acc_row.iter_mut().zip(&row[start..]) {
                                    *a += w * v;
                                }
                            } else {
                                for (a, &v) in
                                    acc_row.iter_mut().zip(row[start..].iter().step_by(stride))
                                {
                                    *a += w * v;
                                }
                            }
                        }
                    }
                }
                let dst = out.plane_mut(b, co);
                let r = oy - oy0;
                dst[r * out_rect.w..(r + 1) * out_rect.w].copy_from_slice(&acc);
            }
        }
    }
    Ok(out)
}
