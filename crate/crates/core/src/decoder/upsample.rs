//! Convex upsampling: every fine pixel is a convex combination of the 3x3
//! coarse neighborhood around its parent cell.
//!
//! Neighbors outside the coarse grid are clamped to the border, so a
//! constant field upsamples to exactly the same constant everywhere.
//! Flow values are not rescaled: they are already in input pixels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of neighbor `(dy, dx)` in `-1..=1` within the 9 mask rows.
#[inline]
fn neighbor(n: usize) -> (isize, isize) {
    (n as isize / 3 - 1, n as isize % 3 - 1)
}

#[inline]
fn clamp(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn check(
    op: &'static str,
    flow: &Tensor,
    mask: &Tensor,
    factor: usize,
) -> Result<(usize, usize, usize)> {
    if factor == 0 {
        return Err(Error::invalid(op, "factor must be >= 1"));
    }
    flow.expect_rank(op, "flow", 3)?;
    let (c, h, w) = (flow.dim(0), flow.dim(1), flow.dim(2));
    mask.expect_shape(op, "mask", &[9, factor * factor, h, w])?;
    Ok((c, h, w))
}

/// Combines `flow: [C, h, w]` with normalized weights
/// `mask: [9, factor^2, h, w]` into `[C, factor h, factor w]`.
///
/// Evaluated as `f(center) + sum_n m_n (f(n) - f(center))`, which equals
/// `sum_n m_n f(n)` whenever the weights sum to one and leaves constant
/// fields untouched bit for bit.
pub fn convex_combine(flow: &Tensor, mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = check("convex_combine", flow, mask, factor)?;
    let (fh, fw) = (h * factor, w * factor);
    let plane = h * w;
    let sub = factor * factor;
    let mut out = Tensor::zeros(&[c, fh, fw]);
    for ch in 0..c {
        let src = &flow.data()[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let center = src[y * w + x];
                for s in 0..sub {
                    let mut acc = 0.0;
                    for n in 0..9 {
                        let (dy, dx) = neighbor(n);
                        let q = clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w);
                        acc += mask.data()[(n * sub + s) * plane + y * w + x] * (src[q] - center);
                    }
                    let acc = center + acc;
                    let (sy, sx) = (s / factor, s % factor);
                    out.data_mut()[(ch * fh + y * factor + sy) * fw + x * factor + sx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d flow, d mask)`.
pub fn convex_combine_backward(
    flow: &Tensor,
    mask: &Tensor,
    factor: usize,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check("convex_combine_backward", flow, mask, factor)?;
    let (fh, fw) = (h * factor, w * factor);
    grad.expect_shape("convex_combine_backward", "upstream gradient", &[c, fh, fw])?;
    let plane = h * w;
    let sub = factor * factor;
    let mut dflow = Tensor::zeros(flow.shape());
    let mut dmask = Tensor::zeros(mask.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for s in 0..sub {
                    let (sy, sx) = (s / factor, s % factor);
                    let g = grad.data()[(ch * fh + y * factor + sy) * fw + x * factor + sx];
                    let p = ch * plane + y * w + x;
                    let center = flow.data()[p];
                    let mut total = 0.0;
                    for n in 0..9 {
                        let (dy, dx) = neighbor(n);
                        let q = clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w);
                        let mi = (n * sub + s) * plane + y * w + x;
                        let m = mask.data()[mi];
                        dmask.data_mut()[mi] += g * (flow.data()[ch * plane + q] - center);
                        dflow.data_mut()[ch * plane + q] += g * m;
                        total += m;
                    }
                    dflow.data_mut()[p] += g * (1.0 - total);
                }
            }
        }
    }
    Ok((dflow, dmask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::softmax;

    #[test]
    fn constant_field_is_exact() {
        let flow = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { 2.75 } else { -13.0 });
        let logits = Tensor::from_fn(&[9, 16, 3, 4], |i| ((i * 37) % 11) as f64 * 0.3);
        let mask = softmax(&logits, 0).unwrap();
        let up = convex_combine(&flow, &mask, 4).unwrap();
        assert_eq!(up.shape(), &[2, 12, 16]);
        for (i, &v) in up.data().iter().enumerate() {
            let expected = if i < 12 * 16 { 2.75 } else { -13.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn wrong_mask_shape_is_rejected() {
        let flow = Tensor::zeros(&[2, 3, 4]);
        assert!(convex_combine(&flow, &Tensor::zeros(&[9, 4, 3, 4]), 4).is_err());
    }
}
