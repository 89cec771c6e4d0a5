//! Dense 4-D `f32` tensors and the deterministic kernels built on them.
//!
//! Every kernel here is a pure function of its inputs. Reductions run in a
//! fixed, documented order so that repeated calls (and tiled versus whole-image
//! evaluation) produce bit-identical results.

mod conv;
mod init;
mod ops;

pub use conv::{conv2d, conv2d_region, ConvWeights};
pub use init::{seeded_init, InitScheme, SplitMix64};
pub use ops::{
    bilinear_resize, bilinear_resize_rows, concat, concat_region, crop, relu, relu_region, softmax,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected} but got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: region {needed} is not covered by the buffer at {available}")]
    RegionNotCovered {
        op: &'static str,
        needed: Rect,
        available: Rect,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Shape of a tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Size in bytes of an `f32` tensor of this shape.
    pub const fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f32>()
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Batch => self.n,
            Axis::Channel => self.c,
            Axis::Height => self.h,
            Axis::Width => self.w,
        }
    }

    pub fn with_dim(mut self, axis: Axis, size: usize) -> Self {
        match axis {
            Axis::Batch => self.n = size,
            Axis::Channel => self.c = size,
            Axis::Height => self.h = size,
            Axis::Width => self.w = size,
        }
        self
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width];
}

/// Axis-aligned pixel rectangle `[y, y + h) x [x, x + w)` in some image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub const fn new(y: usize, x: usize, h: usize, w: usize) -> Self {
        Self { y, x, h, w }
    }

    pub const fn full(h: usize, w: usize) -> Self {
        Self { y: 0, x: 0, h, w }
    }

    pub const fn area(&self) -> usize {
        self.h * self.w
    }

    pub const fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub const fn right(&self) -> usize {
        self.x + self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.y >= self.y
            && other.x >= self.x
            && other.bottom() <= self.bottom()
            && other.right() <= self.right()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.y < other.bottom()
            && other.y < self.bottom()
            && self.x < other.right()
            && other.x < self.right()
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}..{}, {}..{}]", self.y, self.bottom(), self.x, self.right())
    }
}

/// Dense 4-D array of `f32` in n-major, then c, h, w order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                expected: format!("{} elements for {shape}", shape.numel()),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn bytes(&self) -> usize {
        self.shape.bytes()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Channels `[start, start + len)` of every batch item.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.shape.c {
            return Err(TensorError::InvalidArgument {
                op: "channel_slice",
                reason: format!(
                    "channels {start}..{} out of range for {}",
                    start + len,
                    self.shape
                ),
            });
        }
        let shape = self.shape.with_dim(Axis::Channel, len);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            for c in start..start + len {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// A tensor buffer holding the pixels `rect`-aligned at `origin` of a larger
/// image of spatial size `full`.
///
/// Kernels that accept a view treat every pixel outside `full` as zero and
/// require every in-image pixel they read to be present in the buffer.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a Tensor,
    pub origin: (usize, usize),
    pub full: (usize, usize),
}

impl<'a> View<'a> {
    /// A view of a whole image.
    pub fn whole(data: &'a Tensor) -> Self {
        let s = data.shape();
        Self {
            data,
            origin: (0, 0),
            full: (s.h, s.w),
        }
    }

    pub fn placed(data: &'a Tensor, rect: Rect, full: (usize, usize)) -> Self {
        debug_assert_eq!((data.shape().h, data.shape().w), (rect.h, rect.w));
        Self {
            data,
            origin: (rect.y, rect.x),
            full,
        }
    }

    pub fn rect(&self) -> Rect {
        let s = self.data.shape();
        Rect::new(self.origin.0, self.origin.1, s.h, s.w)
    }

    fn require(&self, op: &'static str, needed: Rect) -> Result<()> {
        if needed.is_empty() || self.rect().contains(&needed) {
            Ok(())
        } else {
            Err(TensorError::RegionNotCovered {
                op,
                needed,
                available: self.rect(),
            })
        }
    }
}

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "matrix",
                expected: format!("{} elements for {rows}x{cols}", rows * cols),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f32::max)
    }
}
