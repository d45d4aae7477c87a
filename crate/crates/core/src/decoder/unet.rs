//! 3D U-Net over the stacked cost volume, with an ASPP bottleneck.
//!
//! The stack's 28 channels are the channel axis and `(D', H', W')` the three
//! convolution axes. Each encoder level halves all three axes with a
//! stride-2 convolution (81 -> 41 -> 21 along `D'`), and each decoder level
//! undoes it with a transposed convolution whose output padding is chosen
//! to land exactly on the skip connection's extents.

use crate::cost_volume::CANONICAL_SPECS;
use crate::error::{Error, Result};
use crate::kernels::{Conv3dSpec, LEAKY_SLOPE};
use crate::layers;
use crate::params::{Layout, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STACK_CHANNELS: usize = 28;
const WIDTHS: [usize; 3] = [32, 64, 96];

/// Parallel dilated branches plus a pointwise branch, concatenated and
/// projected back to `width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsppConfig {
    pub prefix: String,
    pub width: usize,
    pub branch_width: usize,
    pub dilations: Vec<usize>,
}

impl AsppConfig {
    /// The bottleneck block of the model.
    pub fn model() -> Self {
        Self {
            prefix: "unet.aspp".into(),
            width: WIDTHS[2],
            branch_width: 32,
            dilations: vec![2, 4, 8],
        }
    }

    pub fn pointwise_spec(&self) -> Conv3dSpec {
        Conv3dSpec::new(self.width, self.branch_width, 1)
    }

    /// 3x3x3 branch with the given dilation on all three axes, padded to
    /// preserve extents.
    pub fn branch_spec(&self, dilation: usize) -> Conv3dSpec {
        Conv3dSpec::new(self.width, self.branch_width, 3)
            .with_dilation(dilation)
            .with_padding(dilation)
    }

    pub fn projection_spec(&self) -> Conv3dSpec {
        Conv3dSpec::new(
            self.branch_width * (self.dilations.len() + 1),
            self.width,
            1,
        )
    }

    pub fn layout(&self, l: &mut Layout) {
        l.conv3d(
            &format!("{}.pointwise", self.prefix),
            &self.pointwise_spec(),
        );
        for &d in &self.dilations {
            l.conv3d(&format!("{}.dil{d}", self.prefix), &self.branch_spec(d));
        }
        l.conv3d(&format!("{}.proj", self.prefix), &self.projection_spec());
    }
}

/// `leaky(proj(leaky(concat(pointwise(x), branch_d(x)...))))`.
pub fn aspp_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &AsppConfig,
    x: &Var,
) -> Result<Var> {
    let mut branches = vec![layers::conv3d(
        tape,
        params,
        &format!("{}.pointwise", cfg.prefix),
        x,
        &cfg.pointwise_spec(),
    )?];
    for &d in &cfg.dilations {
        branches.push(layers::conv3d(
            tape,
            params,
            &format!("{}.dil{d}", cfg.prefix),
            x,
            &cfg.branch_spec(d),
        )?);
    }
    let refs: Vec<&Var> = branches.iter().collect();
    let cat = tape.concat(&refs)?;
    let cat = tape.leaky_relu(&cat, LEAKY_SLOPE);
    let y = layers::conv3d(
        tape,
        params,
        &format!("{}.proj", cfg.prefix),
        &cat,
        &cfg.projection_spec(),
    )?;
    Ok(tape.leaky_relu(&y, LEAKY_SLOPE))
}

/// Inference-only ASPP on a `[width, D, H, W]` tensor.
pub fn aspp(feat: &Tensor, params: &ModelParams, cfg: &AsppConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(feat.clone());
    Ok(aspp_on_tape(&mut tape, params, cfg, &x)?.value().clone())
}

fn down_spec(cin: usize, cout: usize) -> Conv3dSpec {
    Conv3dSpec::same(cin, cout, 3).with_stride(2)
}

/// Transposed conv from `cin` channels back to `cout`, sharing the layout
/// of the `cout -> cin` stride-2 conv.
fn up_spec(cin: usize, cout: usize) -> Conv3dSpec {
    Conv3dSpec::same(cout, cin, 3).with_stride(2)
}

pub(crate) fn layout(l: &mut Layout) {
    let [w0, w1, w2] = WIDTHS;
    l.conv3d("unet.enc0", &Conv3dSpec::same(STACK_CHANNELS, w0, 3));
    l.conv3d("unet.down1", &down_spec(w0, w1));
    l.conv3d("unet.enc1", &Conv3dSpec::same(w1, w1, 3));
    l.conv3d("unet.down2", &down_spec(w1, w2));
    AsppConfig::model().layout(l);
    l.conv_transpose3d("unet.up1", &up_spec(w2, w1));
    l.conv3d("unet.dec1", &Conv3dSpec::same(2 * w1, w1, 3));
    l.conv_transpose3d("unet.up0", &up_spec(w1, w0));
    l.conv3d("unet.dec0", &Conv3dSpec::same(2 * w0, w0, 3));
    l.conv3d("unet.head", &Conv3dSpec::new(w0, CANONICAL_SPECS.len(), 1));
}

/// Output padding that makes a stride-2, k=3, pad=1 transposed conv of
/// `input` land on `target` extents.
fn output_padding(input: &[usize], target: &[usize]) -> Result<[usize; 3]> {
    let mut op = [0; 3];
    for a in 0..3 {
        let base = 2 * input[a] - 1;
        if target[a] < base || target[a] > base + 1 {
            return Err(Error::shape(
                "unet3d",
                format!("skip connection axis {}", a + 1),
                format!("{base} or {}", base + 1),
                target[a],
            ));
        }
        op[a] = target[a] - base;
    }
    Ok(op)
}

fn up_level(
    tape: &mut Tape,
    params: &ModelParams,
    level: usize,
    x: &Var,
    skip: &Var,
    (cin, cout): (usize, usize),
) -> Result<Var> {
    let op = output_padding(&x.shape()[1..], &skip.shape()[1..])?;
    let up = layers::conv_transpose3d(
        tape,
        params,
        &format!("unet.up{level}"),
        x,
        &up_spec(cin, cout),
        op,
    )?;
    let up = tape.leaky_relu(&up, LEAKY_SLOPE);
    let cat = tape.concat(&[&up, skip])?;
    let y = layers::conv3d(
        tape,
        params,
        &format!("unet.dec{level}"),
        &cat,
        &Conv3dSpec::same(2 * cout, cout, 3),
    )?;
    Ok(tape.leaky_relu(&y, LEAKY_SLOPE))
}

/// `[28, D', H', W']` stack to `[7, D', H', W']` logits.
pub fn unet3d_on_tape(tape: &mut Tape, params: &ModelParams, stack: &Var) -> Result<Var> {
    stack.value().expect_rank("unet3d", "stack", 4)?;
    if stack.shape()[0] != STACK_CHANNELS {
        return Err(Error::shape(
            "unet3d",
            "stack axis 0 (channels)",
            STACK_CHANNELS,
            stack.shape()[0],
        ));
    }
    let [w0, w1, w2] = WIDTHS;
    let e0 = layers::conv3d(
        tape,
        params,
        "unet.enc0",
        stack,
        &Conv3dSpec::same(STACK_CHANNELS, w0, 3),
    )?;
    let e0 = tape.leaky_relu(&e0, LEAKY_SLOPE);
    let d1 = layers::conv3d(tape, params, "unet.down1", &e0, &down_spec(w0, w1))?;
    let d1 = tape.leaky_relu(&d1, LEAKY_SLOPE);
    let e1 = layers::conv3d(tape, params, "unet.enc1", &d1, &Conv3dSpec::same(w1, w1, 3))?;
    let e1 = tape.leaky_relu(&e1, LEAKY_SLOPE);
    let d2 = layers::conv3d(tape, params, "unet.down2", &e1, &down_spec(w1, w2))?;
    let d2 = tape.leaky_relu(&d2, LEAKY_SLOPE);
    let b = aspp_on_tape(tape, params, &AsppConfig::model(), &d2)?;
    let u1 = up_level(tape, params, 1, &b, &e1, (w2, w1))?;
    let u0 = up_level(tape, params, 0, &u1, &e0, (w1, w0))?;
    layers::conv3d(
        tape,
        params,
        "unet.head",
        &u0,
        &Conv3dSpec::new(w0, CANONICAL_SPECS.len(), 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_padding_hits_skip_extents() {
        assert_eq!(output_padding(&[41, 4, 4], &[81, 8, 8]).unwrap(), [0, 1, 1]);
        assert_eq!(output_padding(&[21, 1, 1], &[41, 1, 2]).unwrap(), [0, 0, 1]);
        assert!(output_padding(&[21, 1, 1], &[44, 1, 1]).is_err());
    }
}
