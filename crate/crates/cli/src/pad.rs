//! Reflection padding to the network's size multiple and the matching crop.

use dcvnet::Tensor;

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

pub fn next_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Pads the last two axes at the bottom and right to `(h, w)` by reflection.
pub fn reflect_pad(t: &Tensor, h: usize, w: usize) -> Tensor {
    let rank = t.rank();
    let (sh, sw) = (t.dim(rank - 2), t.dim(rank - 1));
    let lead: usize = t.shape()[..rank - 2].iter().product();
    let mut shape = t.shape().to_vec();
    shape[rank - 2] = h;
    shape[rank - 1] = w;
    let mut out = Tensor::zeros(&shape);
    for c in 0..lead {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(c * h + y) * w + x] =
                    t.data()[(c * sh + reflect(y, sh)) * sw + reflect(x, sw)];
            }
        }
    }
    out
}

/// Keeps the top-left `(h, w)` window of the last two axes.
pub fn crop_top_left(t: &Tensor, h: usize, w: usize) -> Tensor {
    let rank = t.rank();
    let (sh, sw) = (t.dim(rank - 2), t.dim(rank - 1));
    let lead: usize = t.shape()[..rank - 2].iter().product();
    let mut shape = t.shape().to_vec();
    shape[rank - 2] = h;
    shape[rank - 1] = w;
    let mut out = Tensor::zeros(&shape);
    for c in 0..lead {
        for y in 0..h {
            let src = &t.data()[(c * sh + y) * sw..][..w];
            out.data_mut()[(c * h + y) * w..][..w].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_without_edge_repeat() {
        let t = Tensor::from_fn(&[1, 1, 3], |i| i as f64);
        let p = reflect_pad(&t, 1, 8);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
        assert_eq!(crop_top_left(&p, 1, 3), t);
    }

    #[test]
    fn multiples() {
        assert_eq!(next_multiple(436, 8), 440);
        assert_eq!(next_multiple(64, 8), 64);
    }
}
