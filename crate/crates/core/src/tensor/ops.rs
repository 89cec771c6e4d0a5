use super::{Axis, Rect, Result, Shape, Tensor, TensorError, View};

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same length")
}

/// The pixels `rect` of a view, copied out.
pub fn crop(input: View<'_>, rect: Rect) -> Result<Tensor> {
    input.require("crop", rect)?;
    let s = input.data.shape();
    if input.rect() == rect {
        return Ok(input.data.clone());
    }
    let (dy, dx) = (rect.y - input.origin.0, rect.x - input.origin.1);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, rect.h, rect.w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.data.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..rect.h {
                let from = (dy + y) * s.w + dx;
                dst[y * rect.w..(y + 1) * rect.w].copy_from_slice(&src[from..from + rect.w]);
            }
        }
    }
    Ok(out)
}

pub fn relu_region(input: View<'_>, rect: Rect) -> Result<Tensor> {
    let mut t = crop(input, rect)?;
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(t)
}

/// Numerically stable softmax along `axis`.
///
/// Each line is shifted by its maximum, exponentiated and normalised in
/// `f64`, then rounded to `f32`. Entries more than ~745 below the line maximum
/// underflow to zero.
pub fn softmax(input: &Tensor, axis: Axis) -> Tensor {
    let s = input.shape();
    let len = s.dim(axis);
    let stride = match axis {
        Axis::Batch => s.c * s.h * s.w,
        Axis::Channel => s.h * s.w,
        Axis::Height => s.w,
        Axis::Width => 1,
    };
    let mut out = Tensor::zeros(s);
    if len == 0 {
        return out;
    }
    let src = input.data();
    let outer = s.numel() / (len * stride);
    let mut exps = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..stride {
            let base = o * len * stride + i;
            let max = (0..len)
                .map(|j| src[base + j * stride])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, e) in exps.iter_mut().enumerate() {
                *e = (src[base + j * stride] as f64 - max as f64).exp();
                sum += *e;
            }
            let dst = out.data_mut();
            for (j, e) in exps.iter().enumerate() {
                dst[base + j * stride] = (e / sum) as f32;
            }
        }
    }
    out
}

pub fn concat(inputs: &[&Tensor], axis: Axis) -> Result<Tensor> {
    let first = inputs.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        reason: "no inputs".into(),
    })?;
    let base = first.shape();
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        for other in Axis::ALL {
            if other != axis && s.dim(other) != base.dim(other) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: format!("{base} outside axis {axis:?}"),
                    found: format!("{s}"),
                });
            }
        }
        total += s.dim(axis);
    }
    let shape = base.with_dim(axis, total);
    // Copy contiguous runs: everything below `axis` is one chunk per input.
    let outer: usize = match axis {
        Axis::Batch => 1,
        Axis::Channel => base.n,
        Axis::Height => base.n * base.c,
        Axis::Width => base.n * base.c * base.h,
    };
    let mut data = Vec::with_capacity(shape.numel());
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape().numel() / outer;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Channel concatenation of the pixels `rect` of several views.
pub fn concat_region(inputs: &[View<'_>], rect: Rect) -> Result<Tensor> {
    let parts = inputs
        .iter()
        .map(|v| crop(*v, rect))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat(&refs, Axis::Channel)
}

/// Source coordinate, lower neighbour, upper neighbour and interpolation
/// weight for one output coordinate under the half-pixel (align-corners =
/// false) convention:
///
/// `src = max((dst + 0.5) * in / out - 0.5, 0)`, `i0 = floor(src)`,
/// `i1 = min(i0 + 1, in - 1)`, `t = src - i0`.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Bilinear resize of the spatial dimensions, half-pixel convention (see
/// [`bilinear_resize_rows`]).
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    bilinear_resize_rows(input, out_h, out_w, 0, out_h)
}

/// Output rows `[y0, y1)` of a bilinear resize to `out_h x out_w`.
///
/// Interpolation is `a + t * (b - a)` along x, then the same along y, so a
/// constant field stays exactly constant and a same-size resize is the
/// identity.
pub fn bilinear_resize_rows(
    input: &Tensor,
    out_h: usize,
    out_w: usize,
    y0: usize,
    y1: usize,
) -> Result<Tensor> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            reason: format!("cannot resize {s} to {out_h}x{out_w}"),
        });
    }
    if y0 > y1 || y1 > out_h {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            reason: format!("row range {y0}..{y1} outside 0..{out_h}"),
        });
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, s.w, out_w)).collect();
    let rows: Vec<_> = (y0..y1).map(|y| source_coord(y, s.h, out_h)).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, y1 - y0, out_w));
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (r, &(i0, i1, ty)) in rows.iter().enumerate() {
                let top = &src[i0 * s.w..(i0 + 1) * s.w];
                let bot = &src[i1 * s.w..(i1 + 1) * s.w];
                for (x, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let a = lerp(top[j0], top[j1], tx);
                    let b = lerp(bot[j0], bot[j1], tx);
                    dst[r * out_w + x] = lerp(a, b, ty);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, InitScheme};

    fn vec_tensor(v: &[f32]) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(relu(&vec_tensor(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(Shape::new(1, 2, 3, 3), -4.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_idempotent() {
        let x = seeded_init(Shape::new(2, 3, 7, 5), InitScheme::UniformFanIn, 9);
        let once = relu(&x);
        assert!(relu(&once).bit_eq(&once));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let y = softmax(&vec_tensor(&[0.0, 0.0]), Axis::Width);
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&vec_tensor(&[1000.0, 1000.0]), Axis::Width);
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let x = vec_tensor(&[0.3, -1.2, 2.5, 0.0]);
        let y = softmax(&x, Axis::Width);
        let exps: Vec<f64> = x.data().iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in y.data().iter().zip(&exps) {
            assert!((*got as f64 - e / total).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_along_each_axis_sums_to_one() {
        let x = seeded_init(Shape::new(2, 3, 4, 5), InitScheme::UniformFanIn, 4);
        for axis in Axis::ALL {
            let y = softmax(&x, axis);
            let s = y.shape();
            let line_start = s.with_dim(axis, 1);
            for n in 0..line_start.n {
                for c in 0..line_start.c {
                    for h in 0..line_start.h {
                        for w in 0..line_start.w {
                            let total: f64 = (0..s.dim(axis))
                                .map(|j| {
                                    let mut i = [n, c, h, w];
                                    i[Axis::ALL.iter().position(|a| *a == axis).unwrap()] = j;
                                    y.at(i[0], i[1], i[2], i[3]) as f64
                                })
                                .sum();
                            assert!((total - 1.0).abs() <= 1e-6, "{axis:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let a = seeded_init(Shape::new(1, 2, 4, 4), InitScheme::UniformFanIn, 1);
        let b = seeded_init(Shape::new(1, 3, 4, 4), InitScheme::UniformFanIn, 2);
        assert!(concat(&[&a], Axis::Channel).unwrap().bit_eq(&a));
        let ab = concat(&[&a, &b], Axis::Channel).unwrap();
        assert_eq!(ab.shape(), Shape::new(1, 5, 4, 4));
        assert!(ab.channel_slice(0, 2).unwrap().bit_eq(&a));
        assert!(ab.channel_slice(2, 3).unwrap().bit_eq(&b));
    }

    #[test]
    fn concat_other_axes() {
        let a = seeded_init(Shape::new(2, 2, 3, 4), InitScheme::UniformFanIn, 1);
        let b = seeded_init(Shape::new(2, 2, 3, 1), InitScheme::UniformFanIn, 2);
        let ab = concat(&[&a, &b], Axis::Width).unwrap();
        assert_eq!(ab.shape(), Shape::new(2, 2, 3, 5));
        assert_eq!(ab.at(1, 1, 2, 3), a.at(1, 1, 2, 3));
        assert_eq!(ab.at(1, 1, 2, 4), b.at(1, 1, 2, 0));
        let c = concat(&[&a, &a], Axis::Batch).unwrap();
        assert_eq!(c.at(3, 1, 2, 3), a.at(1, 1, 2, 3));
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::zeros(Shape::new(1, 2, 4, 5));
        assert!(matches!(
            concat(&[&a, &b], Axis::Channel),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor::full(Shape::new(1, 2, 3, 5), 3.0);
        for (h, w) in [(1, 1), (7, 2), (24, 40), (3, 5)] {
            let r = bilinear_resize(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 3.0));
        }
        let x = seeded_init(Shape::new(1, 2, 6, 9), InitScheme::UniformFanIn, 5);
        assert!(bilinear_resize(&x, 6, 9).unwrap().max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn resize_2x_hand_values() {
        // src = max((dst + 0.5) / 2 - 0.5, 0) gives sources 0, 0.25, 0.75, 1
        // (the last clamped to the final row/column).
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let expected = [
            1.0, 1.25, 1.75, 2.0, //
            1.5, 1.75, 2.25, 2.5, //
            2.5, 2.75, 3.25, 3.5, //
            3.0, 3.25, 3.75, 4.0,
        ];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() <= 1e-6, "{:?}", y.data());
        }
    }

    #[test]
    fn resize_rows_are_bands_of_full_resize() {
        let x = seeded_init(Shape::new(1, 3, 5, 7), InitScheme::UniformFanIn, 8);
        let full = bilinear_resize(&x, 37, 53).unwrap();
        let band = bilinear_resize_rows(&x, 37, 53, 10, 19).unwrap();
        for c in 0..3 {
            for y in 0..9 {
                for xx in 0..53 {
                    assert_eq!(band.at(0, c, y, xx).to_bits(), full.at(0, c, 10 + y, xx).to_bits());
                }
            }
        }
    }

    #[test]
    fn crop_and_region_ops() {
        let x = seeded_init(Shape::new(1, 2, 6, 6), InitScheme::UniformFanIn, 3);
        let view = View::placed(&x, Rect::new(4, 4, 6, 6), (20, 20));
        let c = crop(view, Rect::new(5, 6, 2, 3)).unwrap();
        assert_eq!(c.at(0, 1, 1, 2), x.at(0, 1, 2, 4));
        let r = relu_region(view, Rect::new(5, 6, 2, 3)).unwrap();
        assert_eq!(r.at(0, 1, 1, 2), x.at(0, 1, 2, 4).max(0.0));
        assert!(crop(view, Rect::new(3, 6, 2, 3)).is_err());
    }
}
