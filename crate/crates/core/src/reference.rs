//! Naive nested-loop implementations used as oracles by the test suites and
//! as the baseline in `dcvnet bench`. Nothing here is on a hot path; the
//! loops mirror the mathematical definitions as literally as possible.

use crate::cost_volume::{displacement_grid_offset, CostVolumeSpec};
use crate::tensor::Tensor;

/// 6-nested-loop 2D cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
    dilation: [usize; 2],
) -> Tensor {
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, kh, kw) = (weights.dim(0), weights.dim(2), weights.dim(3));
    let oh = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) / stride[0] + 1;
    let ow = (w + 2 * padding[1] - dilation[1] * (kw - 1) - 1) / stride[1] + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y =
                                (oy * stride[0] + ky * dilation[0]) as isize - padding[0] as isize;
                            let x =
                                (ox * stride[1] + kx * dilation[1]) as isize - padding[1] as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            acc += weights.at(&[co, ci, ky, kx])
                                * input.at(&[ci, y as usize, x as usize]);
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

/// 8-nested-loop 3D cross-correlation with zero padding.
pub fn conv3d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
    dilation: [usize; 3],
) -> Tensor {
    let cin = input.dim(0);
    let ext = [input.dim(1), input.dim(2), input.dim(3)];
    let cout = weights.dim(0);
    let k = [weights.dim(2), weights.dim(3), weights.dim(4)];
    let o: Vec<usize> = (0..3)
        .map(|a| (ext[a] + 2 * padding[a] - dilation[a] * (k[a] - 1) - 1) / stride[a] + 1)
        .collect();
    let mut out = Tensor::zeros(&[cout, o[0], o[1], o[2]]);
    let tap = |a: usize, o: usize, kk: usize| -> Option<usize> {
        let p = (o * stride[a] + kk * dilation[a]) as isize - padding[a] as isize;
        (p >= 0 && p < ext[a] as isize).then_some(p as usize)
    };
    for co in 0..cout {
        for oz in 0..o[0] {
            for oy in 0..o[1] {
                for ox in 0..o[2] {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for kz in 0..k[0] {
                            for ky in 0..k[1] {
                                for kx in 0..k[2] {
                                    if let (Some(z), Some(y), Some(x)) =
                                        (tap(0, oz, kz), tap(1, oy, ky), tap(2, ox, kx))
                                    {
                                        acc += weights.at(&[co, ci, kz, ky, kx])
                                            * input.at(&[ci, z, y, x]);
                                    }
                                }
                            }
                        }
                    }
                    out.set(&[co, oz, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Scatter-form transposed 3D convolution (`weights`: `C_fwd_out x C_fwd_in x k^3`).
pub fn conv_transpose3d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
    output_padding: [usize; 3],
) -> Tensor {
    let cin = input.dim(0);
    let ext = [input.dim(1), input.dim(2), input.dim(3)];
    let cout = weights.dim(1);
    let k = [weights.dim(2), weights.dim(3), weights.dim(4)];
    let o: Vec<usize> = (0..3)
        .map(|a| (ext[a] - 1) * stride[a] + k[a] + output_padding[a] - 2 * padding[a])
        .collect();
    let mut out = Tensor::zeros(&[cout, o[0], o[1], o[2]]);
    for co in 0..cout {
        for z in 0..o[0] {
            for y in 0..o[1] {
                for x in 0..o[2] {
                    out.set(&[co, z, y, x], bias.data()[co]);
                }
            }
        }
    }
    for ci in 0..cin {
        for iz in 0..ext[0] {
            for iy in 0..ext[1] {
                for ix in 0..ext[2] {
                    let v = input.at(&[ci, iz, iy, ix]);
                    for co in 0..cout {
                        for kz in 0..k[0] {
                            for ky in 0..k[1] {
                                for kx in 0..k[2] {
                                    let z = (iz * stride[0] + kz) as isize - padding[0] as isize;
                                    let y = (iy * stride[1] + ky) as isize - padding[1] as isize;
                                    let x = (ix * stride[2] + kx) as isize - padding[2] as isize;
                                    if z < 0 || y < 0 || x < 0 {
                                        continue;
                                    }
                                    let (z, y, x) = (z as usize, y as usize, x as usize);
                                    if z >= o[0] || y >= o[1] || x >= o[2] {
                                        continue;
                                    }
                                    let cur = out.at(&[co, z, y, x]);
                                    out.set(
                                        &[co, z, y, x],
                                        cur + v * weights.at(&[ci, co, kz, ky, kx]),
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Two-pass mean/variance instance normalization.
pub fn instance_norm2d(input: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
    let c = input.dim(0);
    let plane = input.len() / c;
    let mut out = input.clone();
    for ch in 0..c {
        let mut mean = 0.0;
        for i in 0..plane {
            mean += input.data()[ch * plane + i];
        }
        mean /= plane as f64;
        let mut var = 0.0;
        for i in 0..plane {
            let d = input.data()[ch * plane + i] - mean;
            var += d * d;
        }
        var /= plane as f64;
        for i in 0..plane {
            let x = input.data()[ch * plane + i];
            out.data_mut()[ch * plane + i] =
                gain.data()[ch] * (x - mean) / (var + eps).sqrt() + shift.data()[ch];
        }
    }
    out
}

/// Two-pass softmax along `axis`: max, then normalized exponentials.
pub fn softmax(input: &Tensor, axis: usize) -> Tensor {
    let shape = input.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = input.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(input.data()[idx(k)]);
            }
            let mut z = 0.0;
            for k in 0..n {
                z += (input.data()[idx(k)] - m).exp();
            }
            for k in 0..n {
                out.data_mut()[idx(k)] = (input.data()[idx(k)] - m).exp() / z;
            }
        }
    }
    out
}

/// 5-nested-loop dilated cost volume over channel-first feature maps.
///
/// Loops over (sub-vector, vertical offset, horizontal offset, row, column)
/// and evaluates each cosine straight from the strided channel-first
/// layout, recomputing both norms every time.
pub fn cost_volume(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> Tensor {
    let (ch, h, w) = (f1.dim(0), f1.dim(1), f1.dim(2));
    let groups = spec.groups;
    let sub = ch / groups;
    let win = spec.window();
    let mut out = Tensor::zeros(&[groups, win, win, h, w]);
    for c in 0..groups {
        for i in 0..win {
            for j in 0..win {
                let dv = displacement_grid_offset(spec, i);
                let du = displacement_grid_offset(spec, j);
                for y in 0..h {
                    for x in 0..w {
                        let y2 = y as i64 + dv;
                        let x2 = x as i64 + du;
                        if y2 < 0 || x2 < 0 || y2 >= h as i64 || x2 >= w as i64 {
                            continue;
                        }
                        let (y2, x2) = (y2 as usize, x2 as usize);
                        let mut dot = 0.0;
                        let mut n1 = 0.0;
                        let mut n2 = 0.0;
                        for k in c * sub..(c + 1) * sub {
                            let a = f1.data()[(k * h + y) * w + x];
                            let b = f2.data()[(k * h + y2) * w + x2];
                            dot += a * b;
                            n1 += a * a;
                            n2 += b * b;
                        }
                        let (n1, n2) = (n1.sqrt(), n2.sqrt());
                        let v = if n1 == 0.0 || n2 == 0.0 {
                            0.0
                        } else {
                            dot / (n1 * n2)
                        };
                        out.set(&[c, i, j, y, x], v);
                    }
                }
            }
        }
    }
    out
}
