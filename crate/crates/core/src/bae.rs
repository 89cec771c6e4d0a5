//! Boundary-weighted cross entropy.
//!
//! Boundaries are found by running a Sobel pair over the integer label map.
//! Pixels where either response is nonzero get loss weight 2, all others 1,
//! and ignored pixels 0. The loss is normalised by the total weight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub const IGNORE_ID: u8 = 255;
pub const DEFAULT_LAMBDA: f64 = 0.4;
pub const DEFAULT_SOBEL_KSIZE: usize = 5;

/// Smoothing and derivative taps of the 5x5 Sobel pair.
/// `Gx[i][j] = SMOOTH_5[i] * DERIV_5[j]`, `Gy` is its transpose.
pub const SMOOTH_5: [i64; 5] = [1, 4, 6, 4, 1];
pub const DERIV_5: [i64; 5] = [-1, -2, 0, 2, 1];
pub const SMOOTH_3: [i64; 3] = [1, 2, 1];
pub const DERIV_3: [i64; 3] = [-1, 0, 1];

#[derive(Debug, Error, PartialEq)]
pub enum BaeError {
    #[error("unsupported Sobel kernel size {0}, expected 3 or 5")]
    UnsupportedKsize(usize),
    #[error("label {label} at pixel {pixel} is not below the class count {classes}")]
    ClassOutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },
    #[error("{0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, BaeError>;

/// Row-major `height x width` class ids; `ignore_id` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub ignore_id: u8,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(BaeError::ShapeMismatch(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            ignore_id: IGNORE_ID,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            labels,
            ignore_id: IGNORE_ID,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.labels[i] == self.ignore_id
    }

    /// Every non-ignored label must be below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .enumerate()
            .find(|&(_, &l)| l != self.ignore_id && usize::from(l) >= num_classes)
        {
            Some((pixel, &label)) => Err(BaeError::ClassOutOfRange {
                label,
                pixel,
                classes: num_classes,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
}

fn taps(ksize: usize) -> Result<(&'static [i64], &'static [i64])> {
    match ksize {
        3 => Ok((&SMOOTH_3, &DERIV_3)),
        5 => Ok((&SMOOTH_5, &DERIV_5)),
        k => Err(BaeError::UnsupportedKsize(k)),
    }
}

/// 1 where the Sobel pair responds on the label map, else 0. Borders are
/// replicate-padded. Exact integer arithmetic.
pub fn sobel_boundary(mask: &LabelMask, ksize: usize) -> Result<Vec<u8>> {
    let (smooth, deriv) = taps(ksize)?;
    let (h, w) = (mask.height, mask.width);
    let r = (ksize / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0i64, 0i64);
            for i in 0..ksize {
                let yy = clamp(y as i64 + i as i64 - r, h);
                for j in 0..ksize {
                    let xx = clamp(x as i64 + j as i64 - r, w);
                    let l = i64::from(mask.at(yy, xx));
                    gx += smooth[i] * deriv[j] * l;
                    gy += deriv[i] * smooth[j] * l;
                }
            }
            out[y * w + x] = u8::from(gx != 0 || gy != 0);
        }
    }
    Ok(out)
}

/// `1 + boundary` per pixel, 0 at ignored pixels.
pub fn boundary_weights(mask: &LabelMask, ksize: usize) -> Result<WeightMap> {
    let edge = sobel_boundary(mask, ksize)?;
    let weights = edge
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            if mask.is_ignored(i) {
                0.0
            } else {
                1.0 + f32::from(e)
            }
        })
        .collect();
    Ok(WeightMap {
        height: mask.height,
        width: mask.width,
        weights,
    })
}

fn check(logits: &Tensor, mask: &LabelMask, weights: &WeightMap) -> Result<()> {
    let s = logits.shape();
    if s.n != 1 || (s.h, s.w) != (mask.height, mask.width) {
        return Err(BaeError::ShapeMismatch(format!(
            "logits {s} do not match a {}x{} mask",
            mask.height, mask.width
        )));
    }
    if (weights.height, weights.width) != (mask.height, mask.width) {
        return Err(BaeError::ShapeMismatch(format!(
            "weights {}x{} do not match a {}x{} mask",
            weights.height, weights.width, mask.height, mask.width
        )));
    }
    mask.validate(s.c)
}

/// Per-pixel class probabilities in f64, written into `probs`.
fn pixel_softmax(logits: &Tensor, p: usize, probs: &mut [f64]) {
    let s = logits.shape();
    let plane = s.plane();
    let x = |c: usize| f64::from(logits.data()[c * plane + p]);
    let max = (0..s.c).map(x).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (c, o) in probs.iter_mut().enumerate() {
        *o = (x(c) - max).exp();
        sum += *o;
    }
    probs.iter_mut().for_each(|o| *o /= sum);
}

/// `sum_p w_p * -log softmax(logits_p)[y_p] / sum_p w_p`, or 0 when every
/// pixel has zero weight. `logits` is `(1, C, h, w)`.
pub fn weighted_ce(logits: &Tensor, mask: &LabelMask, weights: &WeightMap) -> Result<f64> {
    check(logits, mask, weights)?;
    let s = logits.shape();
    let plane = s.plane();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for p in 0..plane {
        let w = f64::from(weights.weights[p]);
        if mask.is_ignored(p) || w == 0.0 {
            continue;
        }
        let x = |c: usize| f64::from(logits.data()[c * plane + p]);
        let max = (0..s.c).map(x).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..s.c).map(|c| (x(c) - max).exp()).sum::<f64>().ln();
        num += w * (lse - x(usize::from(mask.labels[p])));
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Gradient of [`weighted_ce`] with respect to the logits:
/// `w_p * (softmax_p - onehot(y_p)) / sum w`, zero at ignored pixels.
pub fn ce_gradient(logits: &Tensor, mask: &LabelMask, weights: &WeightMap) -> Result<Tensor> {
    check(logits, mask, weights)?;
    let s = logits.shape();
    let plane = s.plane();
    let den: f64 = (0..plane)
        .filter(|&p| !mask.is_ignored(p))
        .map(|p| f64::from(weights.weights[p]))
        .sum();
    let mut grad = Tensor::zeros(s);
    if den == 0.0 {
        return Ok(grad);
    }
    let mut probs = vec![0.0f64; s.c];
    for p in 0..plane {
        let w = f64::from(weights.weights[p]);
        if mask.is_ignored(p) || w == 0.0 {
            continue;
        }
        pixel_softmax(logits, p, &mut probs);
        let y = usize::from(mask.labels[p]);
        for (c, &pr) in probs.iter().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.data_mut()[c * plane + p] = (w * (pr - onehot) / den) as f32;
        }
    }
    Ok(grad)
}

/// `L_seg + lambda * L_aux`, both weighted by the mask's boundary map.
pub fn total_loss(
    p_seg: &Tensor,
    p_aux: &Tensor,
    mask: &LabelMask,
    lambda: f64,
    ksize: usize,
) -> Result<f64> {
    let weights = boundary_weights(mask, ksize)?;
    Ok(weighted_ce(p_seg, mask, &weights)? + lambda * weighted_ce(p_aux, mask, &weights)?)
}

/// Shape helper for callers building logits for a mask.
pub fn logits_shape(mask: &LabelMask, classes: usize) -> Shape {
    Shape::new(1, classes, mask.height, mask.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, InitScheme, SplitMix64};
    use proptest::prelude::*;

    fn half_plane(h: usize, w: usize, c: usize) -> LabelMask {
        LabelMask::from_fn(h, w, |_, x| u8::from(x >= c))
    }

    /// Zero-padded direct convolution over an explicitly replicate-padded
    /// copy of the mask.
    fn sobel_oracle(mask: &LabelMask, ksize: usize) -> Vec<u8> {
        let r = ksize / 2;
        let (ph, pw) = (mask.height + 2 * r, mask.width + 2 * r);
        let mut padded = vec![0i64; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let sy = y.saturating_sub(r).min(mask.height - 1);
                let sx = x.saturating_sub(r).min(mask.width - 1);
                padded[y * pw + x] = i64::from(mask.at(sy, sx));
            }
        }
        let (s, d): (Vec<i64>, Vec<i64>) = if ksize == 5 {
            (vec![1, 4, 6, 4, 1], vec![-1, -2, 0, 2, 1])
        } else {
            (vec![1, 2, 1], vec![-1, 0, 1])
        };
        let mut out = Vec::new();
        for y in 0..mask.height {
            for x in 0..mask.width {
                let mut gx = 0;
                let mut gy = 0;
                for i in 0..ksize {
                    for j in 0..ksize {
                        let v = padded[(y + i) * pw + x + j];
                        gx += s[i] * d[j] * v;
                        gy += d[i] * s[j] * v;
                    }
                }
                out.push(u8::from(((gx * gx + gy * gy) as f64).sqrt() > 0.0));
            }
        }
        out
    }

    fn random_mask(h: usize, w: usize, classes: u8, ignore_pct: u64, seed: u64) -> LabelMask {
        let mut rng = SplitMix64::new(seed);
        LabelMask::from_fn(h, w, |_, _| {
            if rng.next_below(100) < ignore_pct {
                IGNORE_ID
            } else {
                rng.next_below(u64::from(classes)) as u8
            }
        })
    }

    /// f64 loss over f64 logits, written independently of the module.
    fn loss_f64(logits: &[f64], classes: usize, mask: &LabelMask, w: &[f32]) -> f64 {
        let n = mask.height * mask.width;
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..n {
            if mask.labels[p] == IGNORE_ID {
                continue;
            }
            let z: f64 = (0..classes).map(|c| logits[c * n + p].exp()).sum();
            let y = usize::from(mask.labels[p]);
            num += f64::from(w[p]) * -(logits[y * n + p].exp() / z).ln();
            den += f64::from(w[p]);
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn constant_mask_has_no_boundary() {
        let m = LabelMask::from_fn(9, 7, |_, _| 3);
        assert!(sobel_boundary(&m, 5).unwrap().iter().all(|&b| b == 0));
        let w = boundary_weights(&m, 5).unwrap();
        assert!(w.weights.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_plane_band() {
        for (ksize, band) in [(5, 8..12), (3, 9..11)] {
            let m = half_plane(6, 20, 10);
            let w = boundary_weights(&m, ksize).unwrap();
            for y in 0..6 {
                for x in 0..20 {
                    let expected = if band.contains(&x) { 2.0 } else { 1.0 };
                    assert_eq!(w.weights[y * 20 + x], expected, "ksize {ksize} ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn single_pixel_matches_oracle() {
        let mut m = LabelMask::from_fn(11, 11, |_, _| 0);
        m.labels[5 * 11 + 5] = 1;
        for k in [3, 5] {
            let b = sobel_boundary(&m, k).unwrap();
            assert_eq!(b, sobel_oracle(&m, k));
            assert!(b.contains(&1));
        }
    }

    #[test]
    fn unsupported_ksize() {
        let m = LabelMask::from_fn(3, 3, |_, _| 0);
        assert_eq!(sobel_boundary(&m, 7), Err(BaeError::UnsupportedKsize(7)));
    }

    #[test]
    fn all_ignore() {
        let m = LabelMask::from_fn(4, 4, |_, _| IGNORE_ID);
        let w = boundary_weights(&m, 5).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.0));
        let logits = seeded_init(logits_shape(&m, 3), InitScheme::UniformFanIn, 1);
        assert_eq!(weighted_ce(&logits, &m, &w).unwrap(), 0.0);
        assert!(ce_gradient(&logits, &m, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 24] {
            let m = random_mask(8, 8, c as u8, 10, c as u64);
            let w = boundary_weights(&m, 5).unwrap();
            let logits = Tensor::full(logits_shape(&m, c), 0.37);
            let l = weighted_ce(&logits, &m, &w).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12, "{c}: {l}");
        }
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let m = random_mask(5, 5, 4, 0, 2);
        let w = boundary_weights(&m, 5).unwrap();
        let logits = Tensor::from_fn(logits_shape(&m, 4), |_, c, y, x| {
            if usize::from(m.at(y, x)) == c {
                100.0
            } else {
                -100.0
            }
        });
        assert!(weighted_ce(&logits, &m, &w).unwrap() < 1e-80);
    }

    #[test]
    fn matches_f64_reference() {
        let m = random_mask(4, 4, 3, 0, 3);
        let w = boundary_weights(&m, 5).unwrap();
        let logits = seeded_init(logits_shape(&m, 3), InitScheme::UniformFanIn, 4);
        let reference = loss_f64(
            &logits.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
            3,
            &m,
            &w.weights,
        );
        assert!((weighted_ce(&logits, &m, &w).unwrap() - reference).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label() {
        let m = LabelMask::from_fn(2, 2, |y, x| (y * 2 + x) as u8);
        let w = boundary_weights(&m, 3).unwrap();
        let logits = Tensor::zeros(logits_shape(&m, 3));
        assert!(matches!(
            weighted_ce(&logits, &m, &w),
            Err(BaeError::ClassOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn uniform_two_class_gradient() {
        let m = LabelMask::from_fn(2, 3, |_, x| if x == 2 { IGNORE_ID } else { (x % 2) as u8 });
        let w = boundary_weights(&m, 3).unwrap();
        let g = ce_gradient(&Tensor::zeros(logits_shape(&m, 2)), &m, &w).unwrap();
        let total: f32 = w.weights.iter().sum();
        for y in 0..2 {
            for x in 0..3 {
                let wp = w.weights[y * 3 + x];
                let label = m.at(y, x);
                for c in 0..2u8 {
                    let expected = if label == IGNORE_ID {
                        0.0
                    } else if c == label {
                        -0.5 * wp / total
                    } else {
                        0.5 * wp / total
                    };
                    assert!((g.at(0, c.into(), y, x) - expected).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let m = random_mask(6, 6, 3, 5, 5);
        let seg = seeded_init(logits_shape(&m, 3), InitScheme::UniformFanIn, 6);
        let aux = seeded_init(logits_shape(&m, 3), InitScheme::UniformFanIn, 7);
        let w = boundary_weights(&m, 5).unwrap();
        let main = weighted_ce(&seg, &m, &w).unwrap();
        assert_eq!(total_loss(&seg, &aux, &m, 0.0, 5).unwrap(), main);
        let same = total_loss(&seg, &seg, &m, DEFAULT_LAMBDA, 5).unwrap();
        assert!((same - 1.4 * main).abs() < 1e-12);
        let both = total_loss(&seg, &aux, &m, 0.4, 5).unwrap();
        assert_eq!(both, main + 0.4 * weighted_ce(&aux, &m, &w).unwrap());
    }

    #[test]
    fn boundary_errors_cost_more_with_weights() {
        let m = half_plane(10, 10, 5);
        let w = boundary_weights(&m, 5).unwrap();
        let ones = WeightMap {
            height: 10,
            width: 10,
            weights: vec![1.0; 100],
        };
        let wrong_at = |bad: &dyn Fn(usize) -> bool| {
            Tensor::from_fn(logits_shape(&m, 2), |_, c, y, x| {
                let right = usize::from(m.at(y, x)) == c;
                if right != bad(x) {
                    3.0
                } else {
                    0.0
                }
            })
        };
        let boundary = wrong_at(&|x| (3..7).contains(&x));
        assert!(weighted_ce(&boundary, &m, &w).unwrap() > weighted_ce(&boundary, &m, &ones).unwrap());
        let interior = wrong_at(&|x| x == 0 || x == 9);
        let a = weighted_ce(&interior, &m, &w).unwrap();
        let b = weighted_ce(&interior, &m, &ones).unwrap();
        assert!(a < b);
        let uniform_err = wrong_at(&|_| true);
        let a = weighted_ce(&uniform_err, &m, &w).unwrap();
        let b = weighted_ce(&uniform_err, &m, &ones).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sobel_matches_oracle_and_mirrors(
            h in 1usize..14,
            w in 1usize..14,
            classes in 1u8..5,
            ksize in prop::sample::select(vec![3usize, 5]),
            seed in any::<u64>(),
        ) {
            let m = random_mask(h, w, classes, 0, seed);
            let b = sobel_boundary(&m, ksize).unwrap();
            prop_assert_eq!(&b, &sobel_oracle(&m, ksize));
            let mirrored = LabelMask::from_fn(h, w, |y, x| m.at(y, w - 1 - x));
            let mb = sobel_boundary(&mirrored, ksize).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(mb[y * w + x], b[y * w + w - 1 - x]);
                }
            }
            let wm = boundary_weights(&m, ksize).unwrap();
            prop_assert!(wm.weights.iter().all(|&v| v == 1.0 || v == 2.0));
        }

        #[test]
        fn gradient_matches_finite_differences(
            h in 2usize..6,
            w in 2usize..6,
            classes in 2usize..5,
            seed in any::<u64>(),
        ) {
            let m = random_mask(h, w, classes as u8, 15, seed);
            let wm = boundary_weights(&m, 5).unwrap();
            let mut logits = seeded_init(logits_shape(&m, classes), InitScheme::UniformFanIn, seed ^ 7);
            logits.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            let g = ce_gradient(&logits, &m, &wm).unwrap();
            let base: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
            let eps = 1e-3;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let fd = (loss_f64(&plus, classes, &m, &wm.weights)
                    - loss_f64(&minus, classes, &m, &wm.weights)) / (2.0 * eps);
                prop_assert!((f64::from(g.data()[i]) - fd).abs() < 1e-4, "{} vs {}", g.data()[i], fd);
            }
        }
    }
}
