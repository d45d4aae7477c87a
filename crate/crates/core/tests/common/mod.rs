#![allow(dead_code)]

use std::sync::Arc;

use dcvnet::decoder::forward_on_tape;
use dcvnet::encoder::ImagePair;
use dcvnet::flow::FlowField;
use dcvnet::params::ModelParams;
use dcvnet::synthetic::{synthetic_pair, SyntheticKind};
use dcvnet::tape::{Tape, Var};
use dcvnet::training::{l1_loss_value, loss_and_grads};
use dcvnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// `|a - b|_2 / max(|a|_2, |b|_2)` over paired samples.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Result of comparing tape gradients against central differences.
#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub worst_input: String,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        if other.worst > self.worst {
            other
        } else {
            self
        }
    }
}

/// Checks `build` by contracting its output with a fixed random tensor and
/// comparing tape gradients of every input against central differences.
/// At most `max_entries` entries per input are probed.
pub fn check_gradients<F>(
    inputs: &[(&str, Tensor)],
    max_entries: usize,
    seed: u64,
    build: F,
) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], weights: Option<&Tensor>, tape: &mut Tape| -> (Var, Var) {
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((name, _), v)| tape.param(name, Arc::new(v.clone())))
            .collect();
        let out = build(tape, &vars).expect("forward");
        let w = match weights {
            Some(w) => w.clone(),
            None => uniform(out.shape(), seed ^ 0xabc),
        };
        let loss = tape.weighted_sum(&out, &w).expect("contract");
        (out, loss)
    };

    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let (out, loss) = eval(&base, None, &mut tape);
    let weights = uniform(out.shape(), seed ^ 0xabc);
    let grads = tape.backward(&loss, Tensor::scalar(1.0)).expect("backward");

    let mut r = rng(seed);
    let mut report = GradReport {
        worst: 0.0,
        worst_input: String::new(),
    };
    for (k, (name, t)) in inputs.iter().enumerate() {
        let g = &grads[*name];
        let picks: Vec<usize> = if t.len() <= max_entries {
            (0..t.len()).collect()
        } else {
            (0..max_entries)
                .map(|_| r.random_range(0..t.len()))
                .collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &e in &picks {
            let mut vals = base.clone();
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&vals, Some(&weights), &mut Tape::inference())
                .1
                .value()
                .data()[0];
            vals[k].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&vals, Some(&weights), &mut Tape::inference())
                .1
                .value()
                .data()[0];
            numeric.push((plus - minus) / (2.0 * FD_STEP));
            analytic.push(g.data()[e]);
        }
        let err = relative_error(&analytic, &numeric);
        if err > report.worst || report.worst_input.is_empty() {
            report.worst = err;
            report.worst_input = name.to_string();
        }
    }
    report
}

/// A tensor whose entries stay at least `gap` away from zero, so kinked
/// activations are not straddled by a finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(gap..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn toy_loss(params: &ModelParams, pair: &ImagePair, gt: &FlowField) -> f64 {
    let mut tape = Tape::inference();
    let out = forward_on_tape(&mut tape, params, pair).unwrap();
    l1_loss_value(out.flow_full.value(), &gt.data, gt.mask.as_ref()).unwrap()
}

/// Returns `(relative error, per-parameter [(name, analytic, numeric)])`.
pub fn end_to_end_check(size: usize, samples: usize, seed: u64) -> (f64, Vec<(String, f64, f64)>) {
    let params = ModelParams::init(seed);
    let (pair, gt) = synthetic_pair(SyntheticKind::Translation, 6.0, size, size, seed).unwrap();
    let (_, grads) = loss_and_grads(&params, &pair, &gt).unwrap();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut r = rng(seed ^ 0x77);
    let mut rows = Vec::new();
    while rows.len() < samples {
        let name = &names[r.random_range(0..names.len())];
        let g = &grads[name];
        let e = r.random_range(0..g.len());
        let analytic = g.data()[e];
        let base = params.get(name).unwrap().as_ref().clone();
        let eval = |delta: f64| {
            let mut p = params.clone();
            let mut t = base.clone();
            t.data_mut()[e] += delta;
            p.set(name, t).unwrap();
            toy_loss(&p, &pair, &gt)
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        rows.push((format!("{name}[{e}]"), analytic, numeric));
    }
    let a: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let n: Vec<f64> = rows.iter().map(|r| r.2).collect();
    (relative_error(&a, &n), rows)
}

/// Whether `p` lies in the convex hull of `pts` up to `tol` (2D).
pub fn in_hull(p: (f64, f64), pts: &[(f64, f64)], tol: f64) -> bool {
    let mut v: Vec<(f64, f64)> = pts.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    if v.len() == 1 {
        return (p.0 - v[0].0).abs() <= tol && (p.1 - v[0].1).abs() <= tol;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(v.iter())
        } else {
            Box::new(v.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    let (lo_x, hi_x) = v
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), q| (l.min(q.0), h.max(q.0)));
    let (lo_y, hi_y) = v
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), q| (l.min(q.1), h.max(q.1)));
    if p.0 < lo_x - tol || p.0 > hi_x + tol || p.1 < lo_y - tol || p.1 > hi_y + tol {
        return false;
    }
    let n = hull.len();
    (0..n).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2))
            .sqrt()
            .max(1e-300);
        cross(a, b, p) / len >= -tol
    })
}

/// Normalization, hypothesis bounds, hull membership and constant-field
/// upsampling for one random model and input. Returns the first violation.
pub fn structural_invariants(seed: u64, size: usize) -> std::result::Result<(), String> {
    use dcvnet::cost_volume::CANONICAL_SPECS;
    use dcvnet::decoder::{convex_upsample, forward};

    let params = ModelParams::init(seed);
    let first = uniform(&[3, size, size], seed ^ 11);
    let second = uniform(&[3, size, size], seed ^ 12);
    let pair = ImagePair::new(first, second).map_err(|e| e.to_string())?;
    let pred = forward(&pair, &params).map_err(|e| e.to_string())?;
    let omega = &pred.hypotheses.omega;
    let flows = &pred.hypotheses.flows;
    let alpha = &pred.fusion.alpha;
    let fused = &pred.fusion.flow_coarse;
    let (nd, nc, h, w) = (omega.dim(0), omega.dim(1), omega.dim(2), omega.dim(3));

    for d in 0..nd {
        let spec = &CANONICAL_SPECS[d];
        let reach = spec.reach() as f64;
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..nc).map(|i| omega.at(&[d, i, y, x])).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(format!("omega sums to {s} at dilation {d} ({y},{x})"));
                }
                for c in 0..2 {
                    let f = flows.at(&[d, c, y, x]);
                    if f.abs() > reach {
                        return Err(format!("hypothesis {f} exceeds reach {reach} for {spec}"));
                    }
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..nd).map(|d| alpha.at(&[d, y, x])).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(format!("alpha sums to {s} at ({y},{x})"));
            }
            let pts: Vec<(f64, f64)> = (0..nd)
                .map(|d| (flows.at(&[d, 0, y, x]), flows.at(&[d, 1, y, x])))
                .collect();
            let p = (fused.at(&[0, y, x]), fused.at(&[1, y, x]));
            if !in_hull(p, &pts, 1e-9) {
                return Err(format!("fused flow {p:?} outside hull {pts:?}"));
            }
        }
    }

    let mut r = rng(seed ^ 13);
    let (u, v): (f64, f64) = (r.random_range(-300.0..300.0), r.random_range(-300.0..300.0));
    let constant = FlowField::constant(h, w, u, v).data;
    let guide = uniform(&[32, h, w], seed ^ 14);
    let up4 = convex_upsample(&constant, Some(&guide), 4, &params).map_err(|e| e.to_string())?;
    let up2 = convex_upsample(&up4, None, 2, &params).map_err(|e| e.to_string())?;
    if up2.shape() != [2, 8 * h, 8 * w] {
        return Err(format!("upsampled shape {:?}", up2.shape()));
    }
    let plane = 64 * h * w;
    for (i, &val) in up2.data().iter().enumerate() {
        let want = if i < plane { u } else { v };
        if val != want {
            return Err(format!("constant field changed: {val} vs {want}"));
        }
    }
    Ok(())
}

/// Gradient checks of every differentiable operation, one per case.
pub mod grad_cases {
    use super::{away_from_zero, check_gradients, uniform, GradReport};
    use dcvnet::cost_volume::{CostVolumeSpec, CANONICAL_SPECS};
    use dcvnet::kernels::{Conv2dSpec, Conv3dSpec, ConvSpec};
    use dcvnet::Tensor;

    pub const ALL: &[(&str, fn() -> GradReport)] = &[
        ("conv2d_strided_dilated", conv2d_strided_dilated),
        ("conv3d_strided_dilated", conv3d_strided_dilated),
        (
            "conv_transpose3d_with_output_padding",
            conv_transpose3d_with_output_padding,
        ),
        ("instance_norm", instance_norm),
        ("leaky_relu", leaky_relu),
        ("softmax_each_axis", softmax_each_axis),
        ("elementwise_and_layout_ops", elementwise_and_layout_ops),
        ("spatial_subsample", spatial_subsample),
        ("l2_normalization", l2_normalization),
        ("cost_volume_both_features", cost_volume_both_features),
        (
            "hypotheses_entropy_and_fusion",
            hypotheses_entropy_and_fusion,
        ),
        ("raw_hypotheses_and_entropy", raw_hypotheses_and_entropy),
        ("convex_combination", convex_combination),
        ("l1_loss_with_mask", l1_loss_with_mask),
        ("sum_and_weighted_sum", sum_and_weighted_sum),
        ("chained_conv3d_leaky_sum", chained_conv3d_leaky_sum),
    ];

    pub fn conv2d_strided_dilated() -> GradReport {
        let spec = Conv2dSpec {
            in_channels: 3,
            out_channels: 4,
            kernel: [3, 2],
            stride: [2, 1],
            padding: [1, 2],
            dilation: [1, 2],
        };
        let inputs = [
            ("x", uniform(&[3, 7, 6], 1)),
            ("w", uniform(&spec.weight_shape(), 2)),
            ("b", uniform(&[4], 3)),
        ];
        check_gradients(&inputs, 60, 10, |t, v| t.conv2d(&v[0], &v[1], &v[2], &spec))
    }

    pub fn conv3d_strided_dilated() -> GradReport {
        let spec = Conv3dSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 3, 2],
            stride: [2, 1, 2],
            padding: [1, 2, 0],
            dilation: [1, 2, 1],
        };
        let inputs = [
            ("x", uniform(&[2, 5, 6, 5], 4)),
            ("w", uniform(&spec.weight_shape(), 5)),
            ("b", uniform(&[3], 6)),
        ];
        check_gradients(&inputs, 60, 11, |t, v| t.conv3d(&v[0], &v[1], &v[2], &spec))
    }

    pub fn conv_transpose3d_with_output_padding() -> GradReport {
        let spec = Conv3dSpec::same(2, 3, 3).with_stride(2);
        let inputs = [
            ("x", uniform(&[3, 3, 2, 3], 7)),
            ("w", uniform(&spec.weight_shape(), 8)),
            ("b", uniform(&[2], 9)),
        ];
        check_gradients(&inputs, 60, 12, |t, v| {
            t.conv_transpose3d(&v[0], &v[1], &v[2], &spec, [0, 1, 1])
        })
    }

    pub fn instance_norm() -> GradReport {
        let inputs = [
            ("x", uniform(&[3, 4, 5], 13)),
            ("gain", uniform(&[3], 14)),
            ("shift", uniform(&[3], 15)),
        ];
        check_gradients(&inputs, 60, 16, |t, v| {
            t.instance_norm2d(&v[0], &v[1], &v[2], 1e-5)
        })
    }

    pub fn leaky_relu() -> GradReport {
        let inputs = [("x", away_from_zero(&[2, 5, 5], 1e-3, 17))];
        check_gradients(&inputs, 60, 18, |t, v| Ok(t.leaky_relu(&v[0], 0.1)))
    }

    pub fn softmax_each_axis() -> GradReport {
        (0..3)
            .map(|axis| {
                let inputs = [("x", uniform(&[3, 4, 5], 19 + axis as u64).map(|v| 3.0 * v))];
                check_gradients(&inputs, 60, 20, |t, v| t.softmax(&v[0], axis))
            })
            .fold(GradReport::default(), GradReport::merge)
    }

    pub fn elementwise_and_layout_ops() -> GradReport {
        let inputs = [
            ("a", uniform(&[4, 3, 2], 21)),
            ("b", uniform(&[4, 3, 2], 22)),
        ];
        check_gradients(&inputs, 30, 23, |t, v| {
            let s = t.add(&v[0], &v[1])?;
            let s = t.scale(&s, -1.7);
            let c = t.concat(&[&s, &v[1], &v[0]])?;
            let c = t.select_channels(&c, &[0, 5, 11, 5], &[1.0, 0.5, -2.0, 3.0])?;
            t.reshape(&c, &[4, 6])
        })
    }

    pub fn spatial_subsample() -> GradReport {
        let inputs = [("x", uniform(&[2, 3, 8, 8], 24))];
        check_gradients(&inputs, 60, 25, |t, v| t.spatial_subsample(&v[0], 4))
    }

    pub fn l2_normalization() -> GradReport {
        let inputs = [("x", uniform(&[6, 3, 4], 26))];
        check_gradients(&inputs, 60, 27, |t, v| t.l2norm_channels(&v[0], 1e-8))
    }

    pub fn cost_volume_both_features() -> GradReport {
        let spec = CostVolumeSpec {
            stride: 8,
            dilation: 2,
            radius: 2,
            groups: 2,
        };
        let inputs = [
            ("f1", uniform(&[6, 5, 6], 28)),
            ("f2", uniform(&[6, 5, 6], 29)),
        ];
        check_gradients(&inputs, 80, 30, |t, v| t.cost_volume(&v[0], &v[1], &spec))
    }

    pub fn hypotheses_entropy_and_fusion() -> GradReport {
        let inputs = [
            ("logits", uniform(&[7, 81, 2, 2], 31).map(|v| 2.0 * v)),
            ("alpha_logits", uniform(&[7, 2, 2], 32)),
        ];
        check_gradients(&inputs, 80, 33, |t, v| {
            let omega = t.softmax(&v[0], 1)?;
            let flows = t.flow_hypotheses(&omega, &CANONICAL_SPECS)?;
            let alpha = t.softmax(&v[1], 0)?;
            let fused = t.fuse(&alpha, &flows)?;
            let ent = t.entropy(&omega)?;
            let ent = t.reshape(&ent, &[7, 1, 2, 2])?;
            let flows = t.reshape(&flows, &[14, 1, 2, 2])?;
            let fused = t.reshape(&fused, &[2, 1, 2, 2])?;
            t.concat(&[&flows, &ent, &fused])
        })
    }

    pub fn raw_hypotheses_and_entropy() -> GradReport {
        let omega = uniform(&[7, 81, 1, 2], 34).map(|v| 0.05 + 0.5 * (v + 1.0));
        let inputs = [("omega", omega)];
        check_gradients(&inputs, 80, 35, |t, v| {
            let e = t.entropy(&v[0])?;
            let f = t.flow_hypotheses(&v[0], &CANONICAL_SPECS)?;
            let e = t.reshape(&e, &[7, 2])?;
            let f = t.reshape(&f, &[14, 2])?;
            t.concat(&[&e, &f])
        })
    }

    pub fn convex_combination() -> GradReport {
        let inputs = [
            ("flow", uniform(&[2, 3, 4], 36)),
            ("mask", uniform(&[9, 4, 3, 4], 37)),
        ];
        check_gradients(&inputs, 80, 38, |t, v| t.convex_combine(&v[0], &v[1], 2))
    }

    pub fn l1_loss_with_mask() -> GradReport {
        let target = uniform(&[2, 4, 5], 39);
        let mut p = target.clone();
        p.add_assign(&away_from_zero(&[2, 4, 5], 1e-3, 40));
        let mask = Tensor::from_fn(&[4, 5], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
        let inputs = [("pred", p)];
        check_gradients(&inputs, 40, 41, |t, v| {
            let l = t.l1_loss(&v[0], &target, Some(&mask))?;
            Ok(t.scale(&l, 1.0))
        })
    }

    pub fn sum_and_weighted_sum() -> GradReport {
        let inputs = [("x", uniform(&[3, 4], 42))];
        let w = uniform(&[3, 4], 43);
        check_gradients(&inputs, 12, 44, |t, v| {
            let a = t.weighted_sum(&v[0], &w)?;
            let b = t.sum(&v[0]);
            let a = t.reshape(&a, &[1])?;
            let b = t.reshape(&b, &[1])?;
            t.concat(&[&a, &b])
        })
    }

    pub fn chained_conv3d_leaky_sum() -> GradReport {
        let spec = Conv3dSpec::same(2, 3, 3);
        let spec2: Conv3dSpec = ConvSpec::new(3, 2, 1);
        let inputs = [
            ("x", uniform(&[2, 4, 3, 3], 45)),
            ("w1", uniform(&spec.weight_shape(), 46)),
            ("b1", uniform(&[3], 47)),
            ("w2", uniform(&spec2.weight_shape(), 48)),
            ("b2", uniform(&[2], 49)),
        ];
        check_gradients(&inputs, 60, 50, |t, v| {
            let y = t.conv3d(&v[0], &v[1], &v[2], &spec)?;
            let y = t.leaky_relu(&y, 0.1);
            t.conv3d(&y, &v[3], &v[4], &spec2)
        })
    }
}
