//! 2D/3D cross-correlation, its transpose, and their gradients.
//!
//! All variants lower onto one three-axis geometry (2D convolutions get a
//! unit depth axis) and are computed with blocked im2col + GEMM. Blocks are
//! a fixed function of the geometry, never of the thread count, and partial
//! results are reduced in block order, so outputs are bit-identical for a
//! given input regardless of how rayon schedules the blocks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of an N-axis convolution. Convolution is cross-correlation
/// with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec<const N: usize> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; N],
    pub stride: [usize; N],
    pub padding: [usize; N],
    pub dilation: [usize; N],
}

pub type Conv2dSpec = ConvSpec<2>;
pub type Conv3dSpec = ConvSpec<3>;

impl<const N: usize> ConvSpec<N> {
    /// Cubic kernel, stride 1, no padding, no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; N],
            stride: [1; N],
            padding: [0; N],
            dilation: [1; N],
        }
    }

    /// Odd kernel padded so that stride-1 output extents equal the input.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel).with_padding(kernel / 2)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; N];
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = [padding; N];
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = [dilation; N];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("ConvSpec", "channel counts must be >= 1"));
        }
        for axis in 0..N {
            if self.kernel[axis] == 0 || self.stride[axis] == 0 || self.dilation[axis] == 0 {
                return Err(Error::invalid(
                    "ConvSpec",
                    format!("kernel, stride and dilation must be >= 1 (spatial axis {axis})"),
                ));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// `(in + 2 pad - dilation (k - 1) - 1) / stride + 1`, floored, per axis.
    pub fn output_extents(&self, input: [usize; N]) -> Result<[usize; N]> {
        self.validate()?;
        let mut out = [0; N];
        for axis in 0..N {
            let span = self.dilation[axis] * (self.kernel[axis] - 1) + 1;
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < span {
                return Err(Error::shape(
                    "conv",
                    format!("spatial axis {axis}"),
                    format!(">= {} after padding", span),
                    padded,
                ));
            }
            out[axis] = (padded - span) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Output extents of the transposed convolution:
    /// `(in - 1) stride - 2 pad + dilation (k - 1) + 1 + output_padding`.
    pub fn transpose_output_extents(
        &self,
        input: [usize; N],
        output_padding: [usize; N],
    ) -> Result<[usize; N]> {
        self.validate()?;
        let mut out = [0; N];
        for axis in 0..N {
            if output_padding[axis] >= self.stride[axis] {
                return Err(Error::invalid(
                    "conv_transpose",
                    format!("output padding must be < stride on spatial axis {axis}"),
                ));
            }
            let full = (input[axis] - 1) * self.stride[axis]
                + self.dilation[axis] * (self.kernel[axis] - 1)
                + 1
                + output_padding[axis];
            if full <= 2 * self.padding[axis] {
                return Err(Error::shape(
                    "conv_transpose",
                    format!("spatial axis {axis}"),
                    "positive output extent",
                    0,
                ));
            }
            out[axis] = full - 2 * self.padding[axis];
        }
        Ok(out)
    }
}

/// Three-axis lowering of a convolution, shared by all variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

fn lift<const N: usize>(values: [usize; N], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - N..].copy_from_slice(&values);
    out
}

impl Geometry {
    pub(crate) fn new<const N: usize>(
        spec: &ConvSpec<N>,
        input: [usize; N],
        output: [usize; N],
    ) -> Self {
        Self {
            cin: spec.in_channels,
            cout: spec.out_channels,
            input: lift(input, 1),
            output: lift(output, 1),
            kernel: lift(spec.kernel, 1),
            stride: lift(spec.stride, 1),
            padding: lift(spec.padding, 0),
            dilation: lift(spec.dilation, 1),
        }
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix: `cin * kernel volume`.
    pub(crate) fn patch_len(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    pub(crate) fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub(crate) fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output columns per GEMM block; keeps one im2col block near 1 MiB so it
    /// stays cache-resident while the GEMM packs it.
    fn block_len(&self) -> usize {
        const TARGET: usize = 1 << 17;
        (TARGET / self.patch_len().max(1))
            .clamp(128, 8192)
            .min(self.output_volume())
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let total = self.output_volume();
        let len = self.block_len();
        (0..total)
            .step_by(len)
            .map(|start| (start, len.min(total - start)))
            .collect()
    }

    /// Visits every (row, column, input offset) triple of an im2col block
    /// whose tap lands inside the input.
    fn for_each_tap(&self, start: usize, len: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [_, oh, ow] = self.output;
        let [id, ih, iw] = self.input;
        let in_vol = self.input_volume();
        let mut base = Vec::with_capacity(len);
        for col in start..start + len {
            let oz = col / (oh * ow);
            let oy = (col / ow) % oh;
            let ox = col % ow;
            base.push([
                (oz * self.stride[0]) as isize - self.padding[0] as isize,
                (oy * self.stride[1]) as isize - self.padding[1] as isize,
                (ox * self.stride[2]) as isize - self.padding[2] as isize,
            ]);
        }
        let [kd, kh, kw] = self.kernel;
        let mut row = 0;
        for ci in 0..self.cin {
            let channel = ci * in_vol;
            for kz in 0..kd {
                let dz = (kz * self.dilation[0]) as isize;
                for ky in 0..kh {
                    let dy = (ky * self.dilation[1]) as isize;
                    for kx in 0..kw {
                        let dx = (kx * self.dilation[2]) as isize;
                        for (j, b) in base.iter().enumerate() {
                            let z = b[0] + dz;
                            let y = b[1] + dy;
                            let x = b[2] + dx;
                            if (z as usize) < id && (y as usize) < ih && (x as usize) < iw {
                                f(
                                    row,
                                    j,
                                    channel + (z as usize * ih + y as usize) * iw + x as usize,
                                );
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64], start: usize, len: usize) -> Vec<f64> {
        let mut cols = vec![0.0; self.patch_len() * len];
        self.for_each_tap(start, len, |row, j, src| cols[row * len + j] = input[src]);
        cols
    }

    fn col2im_add(&self, cols: &[f64], start: usize, len: usize, out: &mut [f64]) {
        self.for_each_tap(start, len, |row, j, dst| out[dst] += cols[row * len + j]);
    }
}

/// Strided GEMM: `c = a * b + beta * c` with `a: m x k`, `b: k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    }
    assert!(a.0.len() >= extent(m, k, a.1, a.2));
    assert!(b.0.len() >= extent(k, n, b.1, b.2));
    assert!(c.0.len() >= extent(m, n, c.1, c.2));
    // SAFETY: the asserts above bound every element the routine touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// `y[co, p] = sum_r w[co, r] * im2col(x)[r, p]`, without bias.
pub(crate) fn forward(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let k = g.patch_len();
    let out_vol = g.output_volume();
    let pieces: Vec<(usize, usize, Vec<f64>)> = g
        .blocks()
        .into_par_iter()
        .map(|(start, len)| {
            let cols = g.im2col(x, start, len);
            let mut y = vec![0.0; g.cout * len];
            gemm(
                g.cout,
                k,
                len,
                (w, k as isize, 1),
                (&cols, len as isize, 1),
                0.0,
                (&mut y, len as isize, 1),
            );
            (start, len, y)
        })
        .collect();
    let mut out = vec![0.0; g.cout * out_vol];
    for (start, len, y) in pieces {
        for co in 0..g.cout {
            out[co * out_vol + start..co * out_vol + start + len]
                .copy_from_slice(&y[co * len..(co + 1) * len]);
        }
    }
    out
}

/// Gradient w.r.t. the weights: `dw[co, r] = sum_p dy[co, p] * im2col(x)[r, p]`.
pub(crate) fn weight_grad(g: &Geometry, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let k = g.patch_len();
    let out_vol = g.output_volume();
    let mut dw = vec![0.0; g.cout * k];
    let blocks = g.blocks();
    let group = rayon::current_num_threads().max(1);
    for chunk in blocks.chunks(group) {
        let partials: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|&(start, len)| {
                let cols = g.im2col(x, start, len);
                let mut part = vec![0.0; g.cout * k];
                gemm(
                    g.cout,
                    len,
                    k,
                    (&dy[start..], out_vol as isize, 1),
                    (&cols, 1, len as isize),
                    0.0,
                    (&mut part, k as isize, 1),
                );
                part
            })
            .collect();
        for part in partials {
            for (acc, v) in dw.iter_mut().zip(&part) {
                *acc += v;
            }
        }
    }
    dw
}

/// Adjoint of [`forward`] w.r.t. its input: `col2im(w^T dy)`.
pub(crate) fn adjoint(g: &Geometry, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let k = g.patch_len();
    let out_vol = g.output_volume();
    let mut dx = vec![0.0; g.cin * g.input_volume()];
    let blocks = g.blocks();
    let group = rayon::current_num_threads().max(1);
    for chunk in blocks.chunks(group) {
        let pieces: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|&(start, len)| {
                let mut cols = vec![0.0; k * len];
                gemm(
                    k,
                    g.cout,
                    len,
                    (w, 1, k as isize),
                    (&dy[start..], out_vol as isize, 1),
                    0.0,
                    (&mut cols, len as isize, 1),
                );
                cols
            })
            .collect();
        for (&(start, len), cols) in chunk.iter().zip(&pieces) {
            g.col2im_add(cols, start, len, &mut dx);
        }
    }
    dx
}

fn add_bias(out: &mut [f64], bias: &[f64], volume: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * volume..(c + 1) * volume] {
            *v += b;
        }
    }
}

fn channel_sums(grad: &[f64], channels: usize, volume: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| grad[c * volume..(c + 1) * volume].iter().sum())
        .collect()
}

fn spatial<const N: usize>(t: &Tensor) -> [usize; N] {
    let mut e = [0; N];
    e.copy_from_slice(&t.shape()[1..]);
    e
}

fn check_operands<const N: usize>(
    op: &'static str,
    input: &Tensor,
    input_channels: usize,
    weights: &Tensor,
    spec: &ConvSpec<N>,
    bias: Option<(&Tensor, usize)>,
) -> Result<()> {
    spec.validate()?;
    input.expect_rank(op, "input", N + 1)?;
    if input.dim(0) != input_channels {
        return Err(Error::shape(
            op,
            "input channels",
            input_channels,
            input.dim(0),
        ));
    }
    let ws = spec.weight_shape();
    if weights.shape() != ws.as_slice() {
        let axis = weights
            .shape()
            .iter()
            .zip(&ws)
            .position(|(a, b)| a != b)
            .map(|a| format!("weights axis {a}"))
            .unwrap_or_else(|| "weights rank".to_string());
        return Err(Error::shape(
            op,
            axis,
            format!("{ws:?}"),
            format!("{:?}", weights.shape()),
        ));
    }
    if let Some((b, n)) = bias {
        b.expect_shape(op, "bias", &[n])?;
    }
    Ok(())
}

fn conv_nd<const N: usize>(
    op: &'static str,
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec<N>,
) -> Result<Tensor> {
    check_operands(
        op,
        input,
        spec.in_channels,
        weights,
        spec,
        Some((bias, spec.out_channels)),
    )?;
    let out_ext = spec.output_extents(spatial(input))?;
    let g = Geometry::new(spec, spatial(input), out_ext);
    let mut out = forward(&g, input.data(), weights.data());
    add_bias(&mut out, bias.data(), g.output_volume());
    let mut shape = vec![spec.out_channels];
    shape.extend_from_slice(&out_ext);
    Tensor::new(shape, out)
}

/// 2D cross-correlation of a `C_in x H x W` input with
/// `C_out x C_in x kh x kw` weights.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv2dSpec,
) -> Result<Tensor> {
    conv_nd("conv2d", input, weights, bias, spec)
}

/// 3D cross-correlation of a `C_in x D x H x W` input with
/// `C_out x C_in x kd x kh x kw` weights.
pub fn conv3d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv3dSpec,
) -> Result<Tensor> {
    conv_nd("conv3d", input, weights, bias, spec)
}

/// Transposed 3D convolution: the exact adjoint of [`conv3d`] with `spec`
/// and the same weights.
///
/// The input therefore has `spec.out_channels` channels, the result has
/// `spec.in_channels` channels, and `bias` has `spec.in_channels` entries.
/// `output_padding` disambiguates the output extent when `stride > 1`.
pub fn conv_transpose3d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv3dSpec,
    output_padding: [usize; 3],
) -> Result<Tensor> {
    let op = "conv_transpose3d";
    check_operands(
        op,
        input,
        spec.out_channels,
        weights,
        spec,
        Some((bias, spec.in_channels)),
    )?;
    let in_ext: [usize; 3] = spatial(input);
    let out_ext = spec.transpose_output_extents(in_ext, output_padding)?;
    let g = Geometry::new(spec, out_ext, in_ext);
    let mut out = adjoint(&g, input.data(), weights.data());
    add_bias(&mut out, bias.data(), g.input_volume());
    let mut shape = vec![spec.in_channels];
    shape.extend_from_slice(&out_ext);
    Tensor::new(shape, out)
}

/// Gradients of a convolution w.r.t. its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`] / [`conv3d`] for an upstream gradient
/// shaped like the forward output.
pub fn conv_backward<const N: usize>(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec<N>,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let op = "conv_backward";
    check_operands(op, input, spec.in_channels, weights, spec, None)?;
    let out_ext = spec.output_extents(spatial(input))?;
    let mut out_shape = vec![spec.out_channels];
    out_shape.extend_from_slice(&out_ext);
    grad_out.expect_shape(op, "upstream gradient", &out_shape)?;
    let g = Geometry::new(spec, spatial(input), out_ext);
    let dw = weight_grad(&g, input.data(), grad_out.data());
    let db = channel_sums(grad_out.data(), g.cout, g.output_volume());
    let dx = need_input
        .then(|| {
            Tensor::new(
                input.shape().to_vec(),
                adjoint(&g, grad_out.data(), weights.data()),
            )
        })
        .transpose()?;
    Ok(ConvGrads {
        input: dx,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Backward pass of [`conv_transpose3d`].
pub fn conv_transpose3d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv3dSpec,
    output_padding: [usize; 3],
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let op = "conv_transpose3d_backward";
    check_operands(op, input, spec.out_channels, weights, spec, None)?;
    let in_ext: [usize; 3] = spatial(input);
    let out_ext = spec.transpose_output_extents(in_ext, output_padding)?;
    let mut out_shape = vec![spec.in_channels];
    out_shape.extend_from_slice(&out_ext);
    grad_out.expect_shape(op, "upstream gradient", &out_shape)?;
    let g = Geometry::new(spec, out_ext, in_ext);
    // Roles swap: the upstream gradient plays the forward conv's input and
    // the transposed input plays its output gradient.
    let dw = weight_grad(&g, grad_out.data(), input.data());
    let db = channel_sums(grad_out.data(), g.cin, g.input_volume());
    let dx = need_input
        .then(|| {
            Tensor::new(
                input.shape().to_vec(),
                forward(&g, grad_out.data(), weights.data()),
            )
        })
        .transpose()?;
    Ok(ConvGrads {
        input: dx,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cin], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_is_passthrough() {
        let x = Tensor::from_fn(&[3, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let spec = Conv2dSpec::new(3, 3, 1);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), &spec).unwrap();
        assert_eq!(y, x);

        let x3 = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        let spec3 = Conv3dSpec::new(2, 2, 1);
        let w3 = Tensor::from_fn(&[2, 2, 1, 1, 1], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        assert_eq!(conv3d(&x3, &w3, &Tensor::zeros(&[2]), &spec3).unwrap(), x3);
    }

    #[test]
    fn all_ones_kernel_counts_taps() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let spec = Conv2dSpec::same(1, 1, 3);
        let y = conv2d(
            &x,
            &Tensor::full(&[1, 1, 3, 3], 1.0),
            &Tensor::zeros(&[1]),
            &spec,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.at(&[0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 1, 3]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 4, 4]), 4.0);
        assert_eq!(y.at(&[0, 0, 2]), 6.0);

        let x3 = Tensor::full(&[1, 3, 3, 3], 1.0);
        let y3 = conv3d(
            &x3,
            &Tensor::full(&[1, 1, 3, 3, 3], 1.0),
            &Tensor::zeros(&[1]),
            &Conv3dSpec::same(1, 1, 3),
        )
        .unwrap();
        assert_eq!(y3.at(&[0, 1, 1, 1]), 27.0);
        assert_eq!(y3.at(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn output_extent_formula() {
        let spec = Conv3dSpec::same(1, 1, 3).with_stride(2);
        assert_eq!(spec.output_extents([81, 8, 8]).unwrap(), [41, 4, 4]);
        assert_eq!(spec.output_extents([41, 4, 4]).unwrap(), [21, 2, 2]);
        assert_eq!(
            spec.transpose_output_extents([21, 2, 2], [0, 1, 1])
                .unwrap(),
            [41, 4, 4]
        );
        assert!(Conv2dSpec::new(1, 1, 5).output_extents([3, 3]).is_err());
        assert!(spec.transpose_output_extents([2, 2, 2], [2, 0, 0]).is_err());
    }

    #[test]
    fn transpose_of_single_voxel_doubles_extent() {
        let spec = Conv3dSpec::new(1, 1, 2).with_stride(2);
        let w = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64 + 1.0);
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv_transpose3d(&x, &w, &Tensor::zeros(&[1]), &spec, [0; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert_eq!(y.data(), w.data());
    }

    #[test]
    fn transpose_stamps_kernel_at_impulse() {
        let spec = Conv3dSpec::new(1, 1, 3).with_stride(2).with_padding(1);
        let w = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| i as f64 - 13.0);
        let mut x = Tensor::zeros(&[1, 3, 3, 3]);
        x.set(&[0, 1, 1, 1], 1.0);
        let y = conv_transpose3d(&x, &w, &Tensor::zeros(&[1]), &spec, [0; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 5]);
        // Input voxel 1 lands at output 2 (= 1 * stride - pad + k), so the
        // kernel occupies output indices 1..=3 on each axis.
        for z in 0..5 {
            for yy in 0..5 {
                for x in 0..5 {
                    let inside =
                        (1..=3).contains(&z) && (1..=3).contains(&yy) && (1..=3).contains(&x);
                    let expected = if inside {
                        w.at(&[0, 0, z - 1, yy - 1, x - 1])
                    } else {
                        0.0
                    };
                    assert_eq!(y.at(&[0, z, yy, x]), expected);
                }
            }
        }
    }

    #[test]
    fn errors_name_the_axis() {
        let spec = Conv2dSpec::new(2, 3, 3);
        let x = Tensor::zeros(&[2, 5, 5]);
        let err = conv2d(
            &x,
            &Tensor::zeros(&[3, 2, 3, 4]),
            &Tensor::zeros(&[3]),
            &spec,
        )
        .unwrap_err();
        assert!(err.to_string().contains("weights axis 3"), "{err}");
        let err = conv2d(
            &Tensor::zeros(&[1, 5, 5]),
            &Tensor::zeros(&[3, 2, 3, 3]),
            &Tensor::zeros(&[3]),
            &spec,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conv2d(
            &x,
            &Tensor::zeros(&[3, 2, 3, 3]),
            &Tensor::zeros(&[2]),
            &spec,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }
}
