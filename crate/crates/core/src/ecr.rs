//! Hard-region attention.
//!
//! The pixels whose auxiliary prediction is least confident (smallest gap
//! between the two largest logits) form the hard region `R`. Their features
//! query the whole feature map through attention, and the result is added
//! back onto those pixels.
//!
//! Features are `(1, d, h, w)` tensors, viewed as `N x d` row matrices with
//! `N = h * w` in row-major pixel order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{seeded_init, InitScheme, Matrix, Shape, SplitMix64, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum EcrError {
    #[error("top-2 margin needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("region percentage must lie in (0, 100], got {0}")]
    PercentOutOfRange(f64),
    #[error("{op}: {reason}")]
    Shape { op: &'static str, reason: String },
    #[error("region index {index} out of range for {pixels} pixels")]
    IndexOutOfRange { index: usize, pixels: usize },
    #[error("margin map contains a non-finite value at pixel {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, EcrError>;

fn shape_err<T>(op: &'static str, reason: String) -> Result<T> {
    Err(EcrError::Shape { op, reason })
}

/// Selected pixels, strictly increasing, with their margins.
#[derive(Clone, Debug, PartialEq)]
pub struct HardRegion {
    pub indices: Vec<usize>,
    pub margins: Vec<f32>,
}

impl HardRegion {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `Q (K^T V)` with no normalisation.
    #[default]
    Linear,
    /// Rows of `Q` softmaxed over features, columns of `K` over pixels.
    Softmax,
}

/// Projections stored as `d x d_attn` (query, key) and `d x d_v` (value)
/// matrices applied on the right of the row features.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub mode: AttentionMode,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, mode: AttentionMode) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, mode };
        p.validate()?;
        Ok(p)
    }

    /// Uniform fan-in projections.
    pub fn seeded(d: usize, d_attn: usize, d_v: usize, mode: AttentionMode, seed: u64) -> Self {
        let m = |name: &str, cols: usize| {
            let t = seeded_init(
                Shape::new(cols, d, 1, 1),
                InitScheme::UniformFanIn,
                SplitMix64::derive(seed, name),
            );
            // Kernel layout (out, in) transposed into (in, out).
            Matrix::from_fn(d, cols, |r, c| t.data()[c * d + r])
        };
        Self {
            w_q: m("ecr.w_q", d_attn),
            w_k: m("ecr.w_k", d_attn),
            w_v: m("ecr.w_v", d_v),
            mode,
        }
    }

    pub fn zeros(d: usize, d_attn: usize, d_v: usize, mode: AttentionMode) -> Self {
        Self {
            w_q: Matrix::zeros(d, d_attn),
            w_k: Matrix::zeros(d, d_attn),
            w_v: Matrix::zeros(d, d_v),
            mode,
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_attn(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.w_k.rows() != d || self.w_v.rows() != d {
            return shape_err(
                "attention params",
                format!(
                    "projection inputs disagree: q {d}, k {}, v {}",
                    self.w_k.rows(),
                    self.w_v.rows()
                ),
            );
        }
        if self.w_k.cols() != self.w_q.cols() {
            return shape_err(
                "attention params",
                format!("query width {} != key width {}", self.w_q.cols(), self.w_k.cols()),
            );
        }
        Ok(())
    }
}

/// Per-pixel gap between the largest and second-largest logit, `(n, 1, h, w)`.
pub fn top2_margin(aux_logits: &Tensor) -> Result<Tensor> {
    let s = aux_logits.shape();
    if s.c < 2 {
        return Err(EcrError::TooFewClasses(s.c));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let base = n * s.c * plane;
        let dst = out.plane_mut(n, 0);
        for (p, m) in dst.iter_mut().enumerate() {
            let (mut first, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
            for c in 0..s.c {
                let v = aux_logits.data()[base + c * plane + p];
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            *m = first - second;
        }
    }
    Ok(out)
}

/// `ceil(a * n / 100)`, treating products within 1e-9 of an integer as exact
/// so that e.g. `a = 10, n = 30` gives 3 and not 4.
pub fn region_size(a: f64, n: usize) -> Result<usize> {
    if !(a > 0.0 && a <= 100.0) {
        return Err(EcrError::PercentOutOfRange(a));
    }
    let x = a * n as f64 / 100.0;
    let r = x.round();
    let m = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    Ok((m as usize).min(n))
}

/// The `ceil(a% * N)` pixels with the smallest margins, ties broken by
/// ascending flat index, returned in increasing index order.
pub fn select_hard_region(margins: &Tensor, a: f64) -> Result<HardRegion> {
    let s = margins.shape();
    if s.n != 1 || s.c != 1 {
        return shape_err("select_hard_region", format!("expected a (1, 1, h, w) map, got {s}"));
    }
    let m = region_size(a, s.plane())?;
    let values = margins.data();
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(EcrError::NonFinite(p));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let key = |&i: &usize| (values[i], i);
    if m < order.len() {
        order.select_nth_unstable_by(m, |a, b| {
            let (va, ia) = key(a);
            let (vb, ib) = key(b);
            va.total_cmp(&vb).then(ia.cmp(&ib))
        });
    }
    order.truncate(m);
    order.sort_unstable();
    Ok(HardRegion {
        margins: order.iter().map(|&i| values[i]).collect(),
        indices: order,
    })
}

/// Feature map as an `N x d` matrix.
pub fn flatten(f_in: &Tensor) -> Result<Matrix> {
    let s = f_in.shape();
    if s.n != 1 {
        return shape_err("flatten", format!("expected batch 1, got {s}"));
    }
    let n = s.plane();
    let data = f_in.data();
    Ok(Matrix::from_fn(n, s.c, |p, c| data[c * n + p]))
}

/// Feature rows at the region's pixels, `|R| x d`.
pub fn gather(f_in: &Tensor, region: &HardRegion) -> Result<Matrix> {
    let s = f_in.shape();
    if s.n != 1 {
        return shape_err("gather", format!("expected batch 1, got {s}"));
    }
    let n = s.plane();
    if let Some(&index) = region.indices.iter().find(|&&i| i >= n) {
        return Err(EcrError::IndexOutOfRange { index, pixels: n });
    }
    let data = f_in.data();
    Ok(Matrix::from_fn(region.len(), s.c, |r, c| {
        data[c * n + region.indices[r]]
    }))
}

/// Adds row `i` of `f_conf` onto the features at `region.indices[i]`.
pub fn scatter(f_conf: &Matrix, region: &HardRegion, f_in: &Tensor) -> Result<Tensor> {
    let s = f_in.shape();
    if s.n != 1 {
        return shape_err("scatter", format!("expected batch 1, got {s}"));
    }
    if f_conf.rows() != region.len() || f_conf.cols() != s.c {
        return shape_err(
            "scatter",
            format!(
                "update is {}x{} but the region has {} pixels of width {}",
                f_conf.rows(),
                f_conf.cols(),
                region.len(),
                s.c
            ),
        );
    }
    let n = s.plane();
    if let Some(&index) = region.indices.iter().find(|&&i| i >= n) {
        return Err(EcrError::IndexOutOfRange { index, pixels: n });
    }
    let mut out = f_in.clone();
    let data = out.data_mut();
    for (r, &p) in region.indices.iter().enumerate() {
        for (c, v) in f_conf.row(r).iter().enumerate() {
            data[c * n + p] += v;
        }
    }
    Ok(out)
}

/// Counts scalar multiplications (divisions and exponentials included).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCount(pub u64);

/// `a * b` with f64 accumulation.
fn matmul(a: &Matrix, b: &Matrix, muls: &mut MulCount) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let mut acc = vec![0.0f64; b.cols()];
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        acc.fill(0.0);
        for (k, &x) in a.row(r).iter().enumerate() {
            let x = f64::from(x);
            for (s, &y) in acc.iter_mut().zip(b.row(k)) {
                *s += x * f64::from(y);
            }
        }
        for (o, &s) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    muls.0 += (a.rows() * a.cols() * b.cols()) as u64;
    out
}

/// `a^T * b` with f64 accumulation, without forming `a^T`.
fn matmul_tn(a: &Matrix, b: &Matrix, muls: &mut MulCount) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let mut acc = vec![0.0f64; a.cols() * b.cols()];
    for k in 0..a.rows() {
        for (i, &x) in a.row(k).iter().enumerate() {
            let x = f64::from(x);
            let dst = &mut acc[i * b.cols()..(i + 1) * b.cols()];
            for (s, &y) in dst.iter_mut().zip(b.row(k)) {
                *s += x * f64::from(y);
            }
        }
    }
    muls.0 += (a.rows() * a.cols() * b.cols()) as u64;
    Matrix::new(a.cols(), b.cols(), acc.into_iter().map(|v| v as f32).collect())
        .expect("sized by construction")
}

/// `a * b^T`, materialised.
fn matmul_nt(a: &Matrix, b: &Matrix, muls: &mut MulCount) -> Matrix {
    debug_assert_eq!(a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for r in 0..a.rows() {
        for c in 0..b.rows() {
            let s: f64 = a
                .row(r)
                .iter()
                .zip(b.row(c))
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            out.set(r, c, s as f32);
        }
    }
    muls.0 += (a.rows() * a.cols() * b.rows()) as u64;
    out
}

fn softmax_rows(m: &mut Matrix, muls: &mut MulCount) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
        let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        for (o, v) in row.iter_mut().zip(e) {
            *o = (v / sum) as f32;
        }
    }
    muls.0 += 2 * (m.rows() * m.cols()) as u64;
}

fn softmax_cols(m: &mut Matrix, muls: &mut MulCount) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut max = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for (mx, &v) in max.iter_mut().zip(m.row(r)) {
            *mx = mx.max(f64::from(v));
        }
    }
    let mut sum = vec![0.0f64; cols];
    for r in 0..rows {
        for (s, (&v, &mx)) in sum.iter_mut().zip(m.row(r).iter().zip(&max)) {
            *s += (f64::from(v) - mx).exp();
        }
    }
    for r in 0..rows {
        for (o, (&mx, &s)) in m.row_mut(r).iter_mut().zip(max.iter().zip(&sum)) {
            *o = ((f64::from(*o) - mx).exp() / s) as f32;
        }
    }
    muls.0 += 2 * (rows * cols) as u64;
}

struct Projected {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn project(
    f_in: &Tensor,
    f_hard: &Matrix,
    params: &AttentionParams,
    muls: &mut MulCount,
) -> Result<Projected> {
    params.validate()?;
    let x = flatten(f_in)?;
    if x.cols() != params.d() || f_hard.cols() != params.d() {
        return shape_err(
            "attention",
            format!(
                "feature width {} / query width {} do not match projection input {}",
                x.cols(),
                f_hard.cols(),
                params.d()
            ),
        );
    }
    let mut q = matmul(f_hard, &params.w_q, muls);
    let mut k = matmul(&x, &params.w_k, muls);
    let v = matmul(&x, &params.w_v, muls);
    if params.mode == AttentionMode::Softmax {
        softmax_rows(&mut q, muls);
        softmax_cols(&mut k, muls);
    }
    Ok(Projected { q, k, v })
}

/// Reference attention that forms the `|R| x N` score matrix explicitly.
pub fn generic_attention_counted(
    f_in: &Tensor,
    f_hard: &Matrix,
    params: &AttentionParams,
) -> Result<(Matrix, MulCount)> {
    let mut muls = MulCount::default();
    let Projected { q, k, v } = project(f_in, f_hard, params, &mut muls)?;
    let scores = matmul_nt(&q, &k, &mut muls);
    Ok((matmul(&scores, &v, &mut muls), muls))
}

pub fn generic_attention(f_in: &Tensor, f_hard: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    generic_attention_counted(f_in, f_hard, params).map(|(m, _)| m)
}

/// Attention through the `d_attn x d_v` context `G = K^T V`, computed before
/// the queries are applied. Cost is linear in `N`.
pub fn efficient_attention_counted(
    f_in: &Tensor,
    f_hard: &Matrix,
    params: &AttentionParams,
) -> Result<(Matrix, MulCount)> {
    let mut muls = MulCount::default();
    let Projected { q, k, v } = project(f_in, f_hard, params, &mut muls)?;
    let context = matmul_tn(&k, &v, &mut muls);
    Ok((matmul(&q, &context, &mut muls), muls))
}

pub fn efficient_attention(
    f_in: &Tensor,
    f_hard: &Matrix,
    params: &AttentionParams,
) -> Result<Matrix> {
    efficient_attention_counted(f_in, f_hard, params).map(|(m, _)| m)
}

/// Selects the hard region from `aux_logits`, attends from it to the whole
/// map and adds the result back. Returns the updated features and the region.
pub fn ecr_forward_with_region(
    f_in: &Tensor,
    aux_logits: &Tensor,
    a: f64,
    params: &AttentionParams,
) -> Result<(Tensor, HardRegion)> {
    let (fs, ls) = (f_in.shape(), aux_logits.shape());
    if (fs.n, fs.h, fs.w) != (ls.n, ls.h, ls.w) {
        return shape_err(
            "ecr_forward",
            format!("features {fs} and logits {ls} are not aligned"),
        );
    }
    if params.d_v() != fs.c {
        return shape_err(
            "ecr_forward",
            format!("value width {} must equal feature width {}", params.d_v(), fs.c),
        );
    }
    let region = select_hard_region(&top2_margin(aux_logits)?, a)?;
    let f_hard = gather(f_in, &region)?;
    let f_conf = efficient_attention(f_in, &f_hard, params)?;
    Ok((scatter(&f_conf, &region, f_in)?, region))
}

pub fn ecr_forward(
    f_in: &Tensor,
    aux_logits: &Tensor,
    a: f64,
    params: &AttentionParams,
) -> Result<Tensor> {
    ecr_forward_with_region(f_in, aux_logits, a, params).map(|(t, _)| t)
}

/// `max |a - b| / max |b|`, or the absolute difference when `b` is zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f32 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    let scale = b.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
