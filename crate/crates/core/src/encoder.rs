//! Shared image encoder producing L2-normed features at strides 2 and 8.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{Conv2dSpec, LEAKY_SLOPE};
use crate::layers;
use crate::params::{Layout, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard in [`l2norm_channels`] for the encoder outputs.
pub const FEATURE_EPS: f64 = 1e-8;

pub const S2_CHANNELS: usize = 128;
pub const S8_CHANNELS: usize = 256;

const STEM_WIDTH: usize = 64;
/// `(input width, output width, stride)` of each residual stage.
const STAGES: [(usize, usize, usize); 3] = [(64, 64, 1), (64, 96, 2), (96, 128, 2)];

/// Two images of the same `3 x H x W` shape with `H`, `W` divisible by 8.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub first: Tensor,
    pub second: Tensor,
}

impl ImagePair {
    pub fn new(first: Tensor, second: Tensor) -> Result<Self> {
        check_image("ImagePair", &first)?;
        second.expect_shape("ImagePair", "second image", first.shape())?;
        Ok(Self { first, second })
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.first.dim(1), self.first.dim(2))
    }
}

fn check_image(op: &'static str, image: &Tensor) -> Result<()> {
    image.expect_rank(op, "image", 3)?;
    if image.dim(0) != 3 {
        return Err(Error::shape(
            op,
            "image axis 0 (color channels)",
            3,
            image.dim(0),
        ));
    }
    for (axis, name) in [(1, "height"), (2, "width")] {
        if !image.dim(axis).is_multiple_of(8) {
            return Err(Error::shape(
                op,
                format!("image {name}"),
                "multiple of 8",
                image.dim(axis),
            ));
        }
    }
    Ok(())
}

/// Encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[128, H/2, W/2]`.
    pub f_s2: Tensor,
    /// `[256, H/8, W/8]`.
    pub f_s8: Tensor,
}

/// Divides every position's channel vector by `max(norm, eps)`.
pub fn l2norm_channels(feat: &Tensor, eps: f64) -> Result<Tensor> {
    l2norm_channels_forward(feat, eps).map(|(y, _)| y)
}

/// Also returns the per-position norms for the backward pass.
pub fn l2norm_channels_forward(feat: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    feat.expect_rank("l2norm_channels", "features", 3)?;
    let (c, plane) = (feat.dim(0), feat.dim(1) * feat.dim(2));
    let mut norms = vec![0.0; plane];
    for ch in 0..c {
        for (n, v) in norms
            .iter_mut()
            .zip(&feat.data()[ch * plane..(ch + 1) * plane])
        {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut out = feat.clone();
    out.data_mut().par_chunks_mut(plane).for_each(|row| {
        for (v, n) in row.iter_mut().zip(&norms) {
            *v /= n.max(eps);
        }
    });
    Ok((out, norms))
}

/// `y = v / max(|v|, eps)`: for `|v| > eps` the Jacobian is
/// `(I - y y^T) / |v|`, otherwise `I / eps`.
pub fn l2norm_channels_backward(
    y: &Tensor,
    norms: &[f64],
    eps: f64,
    grad: &Tensor,
) -> Result<Tensor> {
    grad.expect_shape("l2norm_channels_backward", "upstream gradient", y.shape())?;
    let (c, plane) = (y.dim(0), y.dim(1) * y.dim(2));
    let mut proj = vec![0.0; plane];
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        for ((p, a), b) in proj
            .iter_mut()
            .zip(&y.data()[r.clone()])
            .zip(&grad.data()[r])
        {
            *p += a * b;
        }
    }
    let mut out = grad.clone();
    for ch in 0..c {
        for p in 0..plane {
            let k = ch * plane + p;
            out.data_mut()[k] = if norms[p] > eps {
                (grad.data()[k] - y.data()[k] * proj[p]) / norms[p]
            } else {
                grad.data()[k] / eps
            };
        }
    }
    Ok(out)
}

fn stem_spec() -> Conv2dSpec {
    Conv2dSpec::same(3, STEM_WIDTH, 7).with_stride(2)
}

fn block_specs(
    cin: usize,
    cout: usize,
    stride: usize,
) -> (Conv2dSpec, Conv2dSpec, Option<Conv2dSpec>) {
    let conv1 = Conv2dSpec::same(cin, cout, 3).with_stride(stride);
    let conv2 = Conv2dSpec::same(cout, cout, 3);
    let down =
        (stride != 1 || cin != cout).then(|| Conv2dSpec::new(cin, cout, 1).with_stride(stride));
    (conv1, conv2, down)
}

fn blocks() -> impl Iterator<Item = (String, usize, usize, usize)> {
    STAGES
        .iter()
        .enumerate()
        .flat_map(|(s, &(cin, cout, stride))| {
            [
                (format!("encoder.stage{s}.block0"), cin, cout, stride),
                (format!("encoder.stage{s}.block1"), cout, cout, 1),
            ]
        })
}

fn head_s2() -> Conv2dSpec {
    Conv2dSpec::new(STAGES[0].1, S2_CHANNELS, 1)
}

fn head_s8() -> Conv2dSpec {
    Conv2dSpec::new(STAGES[2].1, S8_CHANNELS, 1)
}

pub(crate) fn layout(l: &mut Layout) {
    l.conv2d("encoder.stem.conv", &stem_spec());
    l.norm("encoder.stem.norm", STEM_WIDTH);
    for (name, cin, cout, stride) in blocks() {
        let (c1, c2, down) = block_specs(cin, cout, stride);
        l.conv2d(&format!("{name}.conv1"), &c1);
        l.norm(&format!("{name}.norm1"), cout);
        l.conv2d(&format!("{name}.conv2"), &c2);
        l.norm(&format!("{name}.norm2"), cout);
        if let Some(d) = down {
            l.conv2d(&format!("{name}.down"), &d);
            l.norm(&format!("{name}.norm3"), cout);
        }
    }
    l.conv2d("encoder.head_s2", &head_s2());
    l.conv2d("encoder.head_s8", &head_s8());
}

fn residual_block(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: &Var,
    (cin, cout, stride): (usize, usize, usize),
) -> Result<Var> {
    let (c1, c2, down) = block_specs(cin, cout, stride);
    let y = layers::conv2d(tape, params, &format!("{name}.conv1"), x, &c1)?;
    let y = layers::instance_norm(tape, params, &format!("{name}.norm1"), &y)?;
    let y = tape.leaky_relu(&y, LEAKY_SLOPE);
    let y = layers::conv2d(tape, params, &format!("{name}.conv2"), &y, &c2)?;
    let y = layers::instance_norm(tape, params, &format!("{name}.norm2"), &y)?;
    let y = tape.leaky_relu(&y, LEAKY_SLOPE);
    let skip = match down {
        Some(d) => {
            let s = layers::conv2d(tape, params, &format!("{name}.down"), x, &d)?;
            layers::instance_norm(tape, params, &format!("{name}.norm3"), &s)?
        }
        None => x.clone(),
    };
    let sum = tape.add(&skip, &y)?;
    Ok(tape.leaky_relu(&sum, LEAKY_SLOPE))
}

/// Runs the encoder on `image` (`[3, H, W]`) and returns the L2-normed
/// `(stride-2, stride-8)` features.
pub fn encode_on_tape(tape: &mut Tape, params: &ModelParams, image: &Var) -> Result<(Var, Var)> {
    check_image("encode", image.value())?;
    let x = layers::conv2d(tape, params, "encoder.stem.conv", image, &stem_spec())?;
    let x = layers::instance_norm(tape, params, "encoder.stem.norm", &x)?;
    let mut x = tape.leaky_relu(&x, LEAKY_SLOPE);
    let mut s2 = None;
    for (k, (name, cin, cout, stride)) in blocks().enumerate() {
        x = residual_block(tape, params, &name, &x, (cin, cout, stride))?;
        if k == 1 {
            s2 = Some(x.clone());
        }
    }
    let s2 = s2.expect("first stage has two blocks");
    let f2 = layers::conv2d(tape, params, "encoder.head_s2", &s2, &head_s2())?;
    let f8 = layers::conv2d(tape, params, "encoder.head_s8", &x, &head_s8())?;
    Ok((
        tape.l2norm_channels(&f2, FEATURE_EPS)?,
        tape.l2norm_channels(&f8, FEATURE_EPS)?,
    ))
}

/// Inference-only encoding of one image.
pub fn encode(image: &Tensor, params: &ModelParams) -> Result<FeaturePyramid> {
    let mut tape = Tape::inference();
    let x = tape.constant(image.clone());
    let (f2, f8) = encode_on_tape(&mut tape, params, &x)?;
    Ok(FeaturePyramid {
        f_s2: f2.value().clone(),
        f_s8: f8.value().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let f = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let y = l2norm_channels(&f, FEATURE_EPS).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let y = l2norm_channels(&Tensor::zeros(&[4, 2, 2]), FEATURE_EPS).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn image_size_is_checked() {
        assert!(ImagePair::new(Tensor::zeros(&[3, 12, 16]), Tensor::zeros(&[3, 12, 16])).is_err());
        assert!(ImagePair::new(Tensor::zeros(&[3, 16, 16]), Tensor::zeros(&[3, 16, 24])).is_err());
        assert!(ImagePair::new(Tensor::zeros(&[1, 16, 16]), Tensor::zeros(&[1, 16, 16])).is_err());
        assert!(ImagePair::new(Tensor::zeros(&[3, 16, 16]), Tensor::zeros(&[3, 16, 16])).is_ok());
    }
}
