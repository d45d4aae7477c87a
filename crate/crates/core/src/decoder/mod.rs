//! From the stacked cost volume to full-resolution flow: 3D U-Net logits,
//! interpolation weights, per-dilation hypotheses, learned fusion and two
//! convex upsampling stages (4x then 2x).

pub mod hypotheses;
pub mod unet;
pub mod upsample;

use std::time::Instant;

use serde::Serialize;

use crate::cost_volume::{subsample_factor, CostVolumeSpec, CostVolumeStack, CANONICAL_SPECS};
use crate::encoder::{self, ImagePair};
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec, LEAKY_SLOPE};
use crate::layers;
use crate::params::{Layout, ModelParams};
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

pub use hypotheses::{entropy_map, flow_hypotheses, fuse_hypotheses, ENTROPY_EPS};
pub use unet::{aspp, AsppConfig};
pub use upsample::convex_combine;

/// Flows are divided by this before entering an upsample weight head.
pub const GUIDE_FLOW_SCALE: f64 = 32.0;

const FUSION_WIDTHS: [usize; 4] = [64, 64, 32, 7];
const FUSION_INPUT: usize = 3 * CANONICAL_SPECS.len();
const UP4_HIDDEN: usize = 64;
const UP2_HIDDEN: usize = 32;

/// Every parameter of the full model, in a fixed order.
pub fn model_layout() -> Layout {
    let mut l = Layout::default();
    encoder::layout(&mut l);
    unet::layout(&mut l);
    fusion_layout(&mut l);
    upsample_layout(&mut l);
    l
}

fn fusion_specs() -> [Conv2dSpec; 4] {
    let [a, b, c, d] = FUSION_WIDTHS;
    [
        Conv2dSpec::same(FUSION_INPUT, a, 3),
        Conv2dSpec::same(a, b, 3),
        Conv2dSpec::same(b, c, 3),
        Conv2dSpec::same(c, d, 3),
    ]
}

fn fusion_layout(l: &mut Layout) {
    for (k, s) in fusion_specs().iter().enumerate() {
        l.conv2d(&format!("fusion.conv{k}"), s);
    }
}

fn up4_specs() -> [Conv2dSpec; 2] {
    [
        Conv2dSpec::same(FUSION_WIDTHS[2] + 2, UP4_HIDDEN, 3),
        Conv2dSpec::new(UP4_HIDDEN, 9 * 16, 1),
    ]
}

fn up2_specs() -> [Conv2dSpec; 3] {
    [
        Conv2dSpec::same(2, UP2_HIDDEN, 3),
        Conv2dSpec::same(UP2_HIDDEN, UP2_HIDDEN, 3),
        Conv2dSpec::new(UP2_HIDDEN, 9 * 4, 1),
    ]
}

fn upsample_layout(l: &mut Layout) {
    for (k, s) in up4_specs().iter().enumerate() {
        l.conv2d(&format!("up4.conv{k}"), s);
    }
    for (k, s) in up2_specs().iter().enumerate() {
        l.conv2d(&format!("up2.conv{k}"), s);
    }
}

/// Per-dilation interpolation weights, hypotheses and their entropies.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    /// `[D, D', H', W']`, a distribution over `D'`.
    pub omega: Tensor,
    /// `[D, 2, H', W']` in input pixels.
    pub flows: Tensor,
    /// `[D, H', W']` in nats.
    pub entropy: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `[D, H', W']`, a distribution over `D`.
    pub alpha: Tensor,
    /// `[2, H', W']`.
    pub flow_coarse: Tensor,
    /// `[2, H, W]`.
    pub flow_full: Tensor,
}

/// Wall time per pipeline phase, milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub encode_ms: f64,
    pub cost_volume_ms: f64,
    pub decoder_ms: f64,
    pub upsample_ms: f64,
    pub total_ms: f64,
}

/// Everything [`forward`] computes.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub hypotheses: HypothesisSet,
    pub fusion: FusionOutput,
    pub timings: PhaseTimings,
}

/// Handles to the intermediate values of a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub stack: Var,
    pub logits: Var,
    pub omega: Var,
    pub flows: Var,
    pub entropy: Var,
    pub alpha: Var,
    pub flow_coarse: Var,
    pub flow_stage1: Var,
    pub flow_full: Var,
    pub timings: PhaseTimings,
}

/// Softmax over the candidate axis of `[D, D', H', W']` logits.
pub fn interpolation_weights(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("interpolation_weights", "logits", 4)?;
    kernels::softmax(logits, 1)
}

/// Builds the seven canonical volumes from both images' features and
/// assembles the `[28, 81, H/8, W/8]` stack.
pub fn cost_stack_on_tape(tape: &mut Tape, s2: (&Var, &Var), s8: (&Var, &Var)) -> Result<Var> {
    let mut parts = Vec::with_capacity(CANONICAL_SPECS.len());
    for spec in &CANONICAL_SPECS {
        let (a, b) = if spec.stride == 2 { s2 } else { s8 };
        let v = tape.cost_volume(a, b, spec)?;
        let s = v.shape().to_vec();
        let v = tape.reshape(&v, &[s[0], s[1] * s[2], s[3], s[4]])?;
        let f = subsample_factor(spec);
        parts.push(if f == 1 {
            v
        } else {
            tape.spatial_subsample(&v, f)?
        });
    }
    let refs: Vec<&Var> = parts.iter().collect();
    tape.concat(&refs)
}

/// Logits of the 3D U-Net for a canonical stack.
pub fn unet3d(stack: &CostVolumeStack, params: &ModelParams) -> Result<Tensor> {
    crate::cost_volume::check_canonical_order(&stack.specs)?;
    let mut tape = Tape::inference();
    let x = tape.constant(stack.data.clone());
    Ok(unet::unet3d_on_tape(&mut tape, params, &x)?.value().clone())
}

/// Per-dilation flows and entropies interleaved as `[u, v, H]`, each flow
/// divided by its spec's reach `s d k` and each entropy by `ln D'`.
fn fusion_input(
    tape: &mut Tape,
    flows: &Var,
    entropy: &Var,
    specs: &[CostVolumeSpec],
) -> Result<Var> {
    let s = flows.shape().to_vec();
    let nd = specs.len();
    let flat = tape.reshape(flows, &[2 * nd, s[2], s[3]])?;
    let cat = tape.concat(&[&flat, entropy])?;
    let mut indices = Vec::with_capacity(3 * nd);
    let mut scales = Vec::with_capacity(3 * nd);
    for (d, spec) in specs.iter().enumerate() {
        let reach = spec.reach() as f64;
        indices.extend([2 * d, 2 * d + 1, 2 * nd + d]);
        scales.extend([
            1.0 / reach,
            1.0 / reach,
            1.0 / (spec.candidates() as f64).ln(),
        ]);
    }
    tape.select_channels(&cat, &indices, &scales)
}

/// Fusion network: returns `(alpha, flow_coarse, penultimate features)`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    flows: &Var,
    entropy: &Var,
    specs: &[CostVolumeSpec],
) -> Result<(Var, Var, Var)> {
    if specs.len() != CANONICAL_SPECS.len() {
        return Err(Error::shape(
            "fuse",
            "dilation count",
            CANONICAL_SPECS.len(),
            specs.len(),
        ));
    }
    let mut x = fusion_input(tape, flows, entropy, specs)?;
    let convs = fusion_specs();
    let mut penultimate = None;
    for (k, spec) in convs.iter().enumerate() {
        x = layers::conv2d(tape, params, &format!("fusion.conv{k}"), &x, spec)?;
        if k + 1 < convs.len() {
            x = tape.leaky_relu(&x, LEAKY_SLOPE);
            penultimate = Some(x.clone());
        }
    }
    let alpha = tape.softmax(&x, 0)?;
    let flow = tape.fuse(&alpha, flows)?;
    Ok((alpha, flow, penultimate.expect("fusion has hidden layers")))
}

/// Inference-only fusion: `(alpha, flow_coarse)`.
pub fn fuse(hyps: &HypothesisSet, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let flows = tape.constant(hyps.flows.clone());
    let entropy = tape.constant(hyps.entropy.clone());
    let (a, f, _) = fuse_on_tape(&mut tape, params, &flows, &entropy, &CANONICAL_SPECS)?;
    Ok((a.value().clone(), f.value().clone()))
}

/// Convex upsampling by `factor` with a learned weight head.
///
/// For `factor == 4` the head reads `guide` (the fusion network's
/// penultimate features) next to the scaled flow; for `factor == 2` it reads
/// only the scaled flow and `guide` must be `None`.
pub fn convex_upsample_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    flow: &Var,
    guide: Option<&Var>,
    factor: usize,
) -> Result<Var> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let scaled = tape.scale(flow, 1.0 / GUIDE_FLOW_SCALE);
    let logits = match (factor, guide) {
        (4, Some(g)) => {
            let [c0, c1] = up4_specs();
            let x = tape.concat(&[g, &scaled])?;
            let x = layers::conv2d(tape, params, "up4.conv0", &x, &c0)?;
            let x = tape.leaky_relu(&x, LEAKY_SLOPE);
            layers::conv2d(tape, params, "up4.conv1", &x, &c1)?
        }
        (2, None) => {
            let [c0, c1, c2] = up2_specs();
            let x = layers::conv2d(tape, params, "up2.conv0", &scaled, &c0)?;
            let x = tape.leaky_relu(&x, LEAKY_SLOPE);
            let x = layers::conv2d(tape, params, "up2.conv1", &x, &c1)?;
            let x = tape.leaky_relu(&x, LEAKY_SLOPE);
            layers::conv2d(tape, params, "up2.conv2", &x, &c2)?
        }
        (4, None) => {
            return Err(Error::invalid(
                "convex_upsample",
                "factor 4 needs the fusion features as guide",
            ))
        }
        (2, Some(_)) => return Err(Error::invalid("convex_upsample", "factor 2 takes no guide")),
        _ => {
            return Err(Error::invalid(
                "convex_upsample",
                format!("factor must be 2 or 4, got {factor}"),
            ))
        }
    };
    let logits = tape.reshape(&logits, &[9, factor * factor, h, w])?;
    let mask = tape.softmax(&logits, 0)?;
    tape.convex_combine(flow, &mask, factor)
}

/// Inference-only [`convex_upsample_on_tape`].
pub fn convex_upsample(
    flow: &Tensor,
    guide: Option<&Tensor>,
    factor: usize,
    params: &ModelParams,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let f = tape.constant(flow.clone());
    let g = guide.map(|g| tape.constant(g.clone()));
    Ok(
        convex_upsample_on_tape(&mut tape, params, &f, g.as_ref(), factor)?
            .value()
            .clone(),
    )
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The whole pipeline on `tape`: encode both images, build and stack the
/// cost volumes, filter, form and fuse hypotheses, then upsample 4x and 2x.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    pair: &ImagePair,
) -> Result<ForwardVars> {
    let start = Instant::now();
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let i1 = tape.constant(pair.first.clone());
    let i2 = tape.constant(pair.second.clone());
    let (a2, a8) = encoder::encode_on_tape(tape, params, &i1)?;
    let (b2, b8) = encoder::encode_on_tape(tape, params, &i2)?;
    timings.encode_ms = ms_since(t);

    let t = Instant::now();
    let stack = cost_stack_on_tape(tape, (&a2, &b2), (&a8, &b8))?;
    timings.cost_volume_ms = ms_since(t);

    let t = Instant::now();
    let logits = unet::unet3d_on_tape(tape, params, &stack)?;
    let omega = tape.softmax(&logits, 1)?;
    let flows = tape.flow_hypotheses(&omega, &CANONICAL_SPECS)?;
    let entropy = tape.entropy(&omega)?;
    let (alpha, flow_coarse, features) =
        fuse_on_tape(tape, params, &flows, &entropy, &CANONICAL_SPECS)?;
    timings.decoder_ms = ms_since(t);

    let t = Instant::now();
    let flow_stage1 = convex_upsample_on_tape(tape, params, &flow_coarse, Some(&features), 4)?;
    let flow_full = convex_upsample_on_tape(tape, params, &flow_stage1, None, 2)?;
    timings.upsample_ms = ms_since(t);
    timings.total_ms = ms_since(start);

    Ok(ForwardVars {
        stack,
        logits,
        omega,
        flows,
        entropy,
        alpha,
        flow_coarse,
        flow_stage1,
        flow_full,
        timings,
    })
}

/// Inference at 64-bit precision.
pub fn forward(pair: &ImagePair, params: &ModelParams) -> Result<Prediction> {
    forward_with_precision(pair, params, Precision::F64)
}

pub fn forward_with_precision(
    pair: &ImagePair,
    params: &ModelParams,
    precision: Precision,
) -> Result<Prediction> {
    let mut tape = Tape::inference().with_precision(precision);
    let v = forward_on_tape(&mut tape, params, pair)?;
    Ok(Prediction {
        hypotheses: HypothesisSet {
            omega: v.omega.value().clone(),
            flows: v.flows.value().clone(),
            entropy: v.entropy.value().clone(),
        },
        fusion: FusionOutput {
            alpha: v.alpha.value().clone(),
            flow_coarse: v.flow_coarse.value().clone(),
            flow_full: v.flow_full.value().clone(),
        },
        timings: v.timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique_and_sized() {
        let l = model_layout();
        let mut names: Vec<&str> = l.slots().iter().map(|s| s.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        let scalars: usize = l
            .slots()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert!(scalars > 1_000_000 && scalars < 10_000_000, "{scalars}");
    }

    #[test]
    fn upsample_factor_is_checked() {
        let p = ModelParams::init(0);
        let f = Tensor::zeros(&[2, 2, 2]);
        assert!(convex_upsample(&f, None, 3, &p).is_err());
        assert!(convex_upsample(&f, None, 4, &p).is_err());
        assert_eq!(
            convex_upsample(&f, None, 2, &p).unwrap().shape(),
            &[2, 4, 4]
        );
    }
}
