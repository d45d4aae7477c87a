//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Values live in [`Var`] handles (shared, immutable tensors). When the tape
//! is recording and an op has at least one tracked input, the op is appended
//! together with whatever it needs for its backward pass. `backward` walks
//! the record in exact reverse execution order and returns gradients for
//! the named parameters only.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::cost_volume::{build_cost_volume, cost_volume_backward, CostVolumeSpec};
use crate::decoder::hypotheses::{
    entropy_map, entropy_map_backward, flow_hypotheses, flow_hypotheses_backward, fuse_hypotheses,
    fuse_hypotheses_backward,
};
use crate::decoder::upsample::{convex_combine, convex_combine_backward};
use crate::encoder::{l2norm_channels_backward, l2norm_channels_forward};
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec, Conv3dSpec, InstanceNormCache};
use crate::tensor::Tensor;
use crate::training::loss::{l1_loss_backward, l1_loss_value};

/// Storage precision of op outputs. Arithmetic always accumulates in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// A value produced on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Arc<Tensor>,
    tracked: bool,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.tracked
    }
}

enum Op {
    Conv2d {
        spec: Conv2dSpec,
        x: Arc<Tensor>,
        w: Arc<Tensor>,
    },
    Conv3d {
        spec: Conv3dSpec,
        x: Arc<Tensor>,
        w: Arc<Tensor>,
    },
    ConvTranspose3d {
        spec: Conv3dSpec,
        output_padding: [usize; 3],
        x: Arc<Tensor>,
        w: Arc<Tensor>,
    },
    InstanceNorm {
        cache: InstanceNormCache,
        gain: Arc<Tensor>,
    },
    LeakyRelu {
        x: Arc<Tensor>,
        slope: f64,
    },
    Softmax {
        y: Arc<Tensor>,
        axis: usize,
    },
    Add,
    Scale(f64),
    Concat {
        sizes: Vec<usize>,
    },
    SelectChannels {
        indices: Vec<usize>,
        scales: Vec<f64>,
        input_shape: Vec<usize>,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
    Subsample {
        factor: usize,
        input_shape: Vec<usize>,
    },
    L2Norm {
        y: Arc<Tensor>,
        norms: Vec<f64>,
        eps: f64,
    },
    CostVolume {
        spec: CostVolumeSpec,
        f1: Arc<Tensor>,
        f2: Arc<Tensor>,
        volume: Arc<Tensor>,
    },
    Hypotheses {
        specs: Vec<CostVolumeSpec>,
        omega_shape: Vec<usize>,
    },
    Entropy {
        omega: Arc<Tensor>,
    },
    Fuse {
        alpha: Arc<Tensor>,
        flows: Arc<Tensor>,
    },
    ConvexCombine {
        flow: Arc<Tensor>,
        mask: Arc<Tensor>,
        factor: usize,
    },
    L1Loss {
        pred: Arc<Tensor>,
        target: Arc<Tensor>,
        mask: Option<Arc<Tensor>>,
    },
    WeightedSum {
        weights: Arc<Tensor>,
    },
}

struct Record {
    output: usize,
    inputs: Vec<usize>,
    needs: Vec<bool>,
    op: Op,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Tape {
    recording: bool,
    consumed: bool,
    precision: Precision,
    next_id: usize,
    records: Vec<Record>,
    params: BTreeMap<String, Var>,
    param_ids: Vec<(String, usize, Vec<usize>)>,
}

impl Tape {
    /// A tape that records ops for a later [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            recording: true,
            ..Self::default()
        }
    }

    /// A tape that records nothing; values are freed as soon as their
    /// handles drop.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of ops recorded so far.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops every record and parameter registration.
    pub fn reset(&mut self) {
        self.records.clear();
        self.params.clear();
        self.param_ids.clear();
        self.consumed = false;
    }

    fn fresh(&mut self, value: Arc<Tensor>, tracked: bool) -> Var {
        let id = self.next_id;
        self.next_id += 1;
        Var { id, value, tracked }
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.fresh(Arc::new(value), false)
    }

    /// A named learnable parameter. Registering the same name again returns
    /// the existing handle, so a parameter used twice accumulates gradients
    /// into one slot.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Var {
        if let Some(v) = self.params.get(name) {
            return v.clone();
        }
        let tracked = self.recording;
        let var = self.fresh(value, tracked);
        if tracked {
            self.param_ids
                .push((name.to_string(), var.id, var.shape().to_vec()));
        }
        self.params.insert(name.to_string(), var.clone());
        var
    }

    fn push(
        &mut self,
        mut value: Tensor,
        inputs: &[&Var],
        op: impl FnOnce(&Arc<Tensor>) -> Op,
    ) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        let value = Arc::new(value);
        let tracked = self.recording && inputs.iter().any(|v| v.tracked);
        let out = self.fresh(value, tracked);
        if tracked {
            self.records.push(Record {
                output: out.id,
                inputs: inputs.iter().map(|v| v.id).collect(),
                needs: inputs.iter().map(|v| v.tracked).collect(),
                op: op(&out.value),
            });
        }
        out
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, spec: &Conv2dSpec) -> Result<Var> {
        let y = kernels::conv2d(x.value(), w.value(), b.value(), spec)?;
        Ok(self.push(y, &[x, w, b], |_| Op::Conv2d {
            spec: *spec,
            x: x.value.clone(),
            w: w.value.clone(),
        }))
    }

    pub fn conv3d(&mut self, x: &Var, w: &Var, b: &Var, spec: &Conv3dSpec) -> Result<Var> {
        let y = kernels::conv3d(x.value(), w.value(), b.value(), spec)?;
        Ok(self.push(y, &[x, w, b], |_| Op::Conv3d {
            spec: *spec,
            x: x.value.clone(),
            w: w.value.clone(),
        }))
    }

    pub fn conv_transpose3d(
        &mut self,
        x: &Var,
        w: &Var,
        b: &Var,
        spec: &Conv3dSpec,
        output_padding: [usize; 3],
    ) -> Result<Var> {
        let y = kernels::conv_transpose3d(x.value(), w.value(), b.value(), spec, output_padding)?;
        Ok(self.push(y, &[x, w, b], |_| Op::ConvTranspose3d {
            spec: *spec,
            output_padding,
            x: x.value.clone(),
            w: w.value.clone(),
        }))
    }

    pub fn instance_norm2d(&mut self, x: &Var, gain: &Var, shift: &Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            kernels::instance_norm2d_forward(x.value(), gain.value(), shift.value(), eps)?;
        Ok(self.push(y, &[x, gain, shift], |_| Op::InstanceNorm {
            cache,
            gain: gain.value.clone(),
        }))
    }

    pub fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let y = kernels::leaky_relu(x.value(), slope);
        self.push(y, &[x], |_| Op::LeakyRelu {
            x: x.value.clone(),
            slope,
        })
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(x.value(), axis)?;
        Ok(self.push(y, &[x], |y| Op::Softmax { y: y.clone(), axis }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        b.value().expect_shape("add", "right operand", a.shape())?;
        let mut y = a.value().clone();
        y.add_assign(b.value());
        Ok(self.push(y, &[a, b], |_| Op::Add))
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let y = x.value().map(|v| v * factor);
        self.push(y, &[x], |_| Op::Scale(factor))
    }

    /// Concatenation along axis 0; trailing axes must agree.
    pub fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?
            .shape()
            .to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for (k, p) in parts.iter().enumerate() {
            if p.shape()[1..] != first[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("operand {k} trailing axes"),
                    format!("{:?}", &first[1..]),
                    format!("{:?}", &p.shape()[1..]),
                ));
            }
            sizes.push(p.shape()[0]);
            data.extend_from_slice(p.value().data());
        }
        let mut shape = first;
        shape[0] = sizes.iter().sum();
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, parts, |_| Op::Concat { sizes }))
    }

    /// `out[k] = scales[k] * x[indices[k]]` along axis 0.
    pub fn select_channels(&mut self, x: &Var, indices: &[usize], scales: &[f64]) -> Result<Var> {
        if indices.len() != scales.len() || indices.is_empty() {
            return Err(Error::invalid(
                "select_channels",
                "indices and scales must be equal, nonempty",
            ));
        }
        let c = x.shape()[0];
        let inner = x.value().len() / c;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for (&i, &s) in indices.iter().zip(scales) {
            if i >= c {
                return Err(Error::shape(
                    "select_channels",
                    "channel index",
                    format!("< {c}"),
                    i,
                ));
            }
            data.extend(
                x.value().data()[i * inner..(i + 1) * inner]
                    .iter()
                    .map(|v| v * s),
            );
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, &[x], |_| Op::SelectChannels {
            indices: indices.to_vec(),
            scales: scales.to_vec(),
            input_shape: x.shape().to_vec(),
        }))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = x.value().clone().reshape(shape)?;
        Ok(self.push(y, &[x], |_| Op::Reshape {
            input_shape: x.shape().to_vec(),
        }))
    }

    pub fn spatial_subsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        let y = kernels::spatial_subsample(x.value(), factor)?;
        Ok(self.push(y, &[x], |_| Op::Subsample {
            factor,
            input_shape: x.shape().to_vec(),
        }))
    }

    pub fn l2norm_channels(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let (y, norms) = l2norm_channels_forward(x.value(), eps)?;
        Ok(self.push(y, &[x], |y| Op::L2Norm {
            y: y.clone(),
            norms,
            eps,
        }))
    }

    pub fn cost_volume(&mut self, f1: &Var, f2: &Var, spec: &CostVolumeSpec) -> Result<Var> {
        let v = build_cost_volume(f1.value(), f2.value(), spec)?;
        Ok(self.push(v.data, &[f1, f2], |volume| Op::CostVolume {
            spec: *spec,
            f1: f1.value.clone(),
            f2: f2.value.clone(),
            volume: volume.clone(),
        }))
    }

    pub fn flow_hypotheses(&mut self, omega: &Var, specs: &[CostVolumeSpec]) -> Result<Var> {
        let y = flow_hypotheses(omega.value(), specs)?;
        Ok(self.push(y, &[omega], |_| Op::Hypotheses {
            specs: specs.to_vec(),
            omega_shape: omega.shape().to_vec(),
        }))
    }

    pub fn entropy(&mut self, omega: &Var) -> Result<Var> {
        let y = entropy_map(omega.value())?;
        Ok(self.push(y, &[omega], |_| Op::Entropy {
            omega: omega.value.clone(),
        }))
    }

    pub fn fuse(&mut self, alpha: &Var, flows: &Var) -> Result<Var> {
        let y = fuse_hypotheses(alpha.value(), flows.value())?;
        Ok(self.push(y, &[alpha, flows], |_| Op::Fuse {
            alpha: alpha.value.clone(),
            flows: flows.value.clone(),
        }))
    }

    pub fn convex_combine(&mut self, flow: &Var, mask: &Var, factor: usize) -> Result<Var> {
        let y = convex_combine(flow.value(), mask.value(), factor)?;
        Ok(self.push(y, &[flow, mask], |_| Op::ConvexCombine {
            flow: flow.value.clone(),
            mask: mask.value.clone(),
            factor,
        }))
    }

    /// Mean absolute error over valid pixels and both channels.
    pub fn l1_loss(&mut self, pred: &Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        let v = l1_loss_value(pred.value(), target, mask)?;
        Ok(self.push(Tensor::scalar(v), &[pred], |_| Op::L1Loss {
            pred: pred.value.clone(),
            target: Arc::new(target.clone()),
            mask: mask.map(|m| Arc::new(m.clone())),
        }))
    }

    /// `sum(x * weights)`; with all-ones weights this is a plain sum.
    pub fn weighted_sum(&mut self, x: &Var, weights: &Tensor) -> Result<Var> {
        weights.expect_shape("weighted_sum", "weights", x.shape())?;
        let v = x.value().dot(weights);
        Ok(self.push(Tensor::scalar(v), &[x], |_| Op::WeightedSum {
            weights: Arc::new(weights.clone()),
        }))
    }

    pub fn sum(&mut self, x: &Var) -> Var {
        let ones = Tensor::full(x.shape(), 1.0);
        self.weighted_sum(x, &ones)
            .expect("shapes agree by construction")
    }

    /// Replays the record backwards from `root`, seeded with `loss_grad`
    /// (shaped like `root`). Returns a gradient for every registered
    /// parameter, zero where none flowed.
    pub fn backward(&mut self, root: &Var, loss_grad: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        loss_grad.expect_shape("backward", "loss gradient", root.shape())?;
        self.consumed = true;
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        if root.tracked {
            grads.insert(root.id, loss_grad);
        }
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(g) = grads.remove(&rec.output) else {
                continue;
            };
            let input_grads = backward_op(&rec.op, &g, &rec.needs)?;
            for ((id, need), ig) in rec.inputs.iter().zip(&rec.needs).zip(input_grads) {
                if !need {
                    continue;
                }
                if let Some(ig) = ig {
                    match grads.get_mut(id) {
                        Some(acc) => acc.add_assign(&ig),
                        None => {
                            grads.insert(*id, ig);
                        }
                    }
                }
            }
        }
        self.records = records;
        Ok(self
            .param_ids
            .iter()
            .map(|(name, id, shape)| {
                let g = grads.remove(id).unwrap_or_else(|| Tensor::zeros(shape));
                (name.clone(), g)
            })
            .collect())
    }
}

fn backward_op(op: &Op, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    Ok(match op {
        Op::Conv2d { spec, x, w } => {
            let cg = kernels::conv_backward(x, w, spec, g, needs[0])?;
            vec![cg.input, Some(cg.weights), Some(cg.bias)]
        }
        Op::Conv3d { spec, x, w } => {
            let cg = kernels::conv_backward(x, w, spec, g, needs[0])?;
            vec![cg.input, Some(cg.weights), Some(cg.bias)]
        }
        Op::ConvTranspose3d {
            spec,
            output_padding,
            x,
            w,
        } => {
            let cg = kernels::conv_transpose3d_backward(x, w, spec, *output_padding, g, needs[0])?;
            vec![cg.input, Some(cg.weights), Some(cg.bias)]
        }
        Op::InstanceNorm { cache, gain } => {
            let (dx, dg, ds) = kernels::instance_norm2d_backward(cache, gain, g)?;
            vec![Some(dx), Some(dg), Some(ds)]
        }
        Op::LeakyRelu { x, slope } => vec![Some(kernels::leaky_relu_backward(x, *slope, g))],
        Op::Softmax { y, axis } => vec![Some(kernels::softmax_backward(y, *axis, g)?)],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Scale(f) => vec![Some(g.map(|v| v * f))],
        Op::Concat { sizes } => {
            let inner = g.len() / g.dim(0);
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &n in sizes {
                let mut shape = g.shape().to_vec();
                shape[0] = n;
                out.push(Some(Tensor::new(
                    shape,
                    g.data()[start * inner..(start + n) * inner].to_vec(),
                )?));
                start += n;
            }
            out
        }
        Op::SelectChannels {
            indices,
            scales,
            input_shape,
        } => {
            let mut dx = Tensor::zeros(input_shape);
            let inner = dx.len() / input_shape[0];
            for (k, (&i, &s)) in indices.iter().zip(scales).enumerate() {
                let src = &g.data()[k * inner..(k + 1) * inner];
                for (d, v) in dx.data_mut()[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(src)
                {
                    *d += s * v;
                }
            }
            vec![Some(dx)]
        }
        Op::Reshape { input_shape } => vec![Some(g.clone().reshape(input_shape)?)],
        Op::Subsample {
            factor,
            input_shape,
        } => {
            vec![Some(kernels::spatial_subsample_backward(
                input_shape,
                *factor,
                g,
            )?)]
        }
        Op::L2Norm { y, norms, eps } => vec![Some(l2norm_channels_backward(y, norms, *eps, g)?)],
        Op::CostVolume {
            spec,
            f1,
            f2,
            volume,
        } => {
            let (d1, d2) = cost_volume_backward(f1, f2, spec, volume, g)?;
            vec![Some(d1), Some(d2)]
        }
        Op::Hypotheses { specs, omega_shape } => {
            vec![Some(flow_hypotheses_backward(specs, omega_shape, g)?)]
        }
        Op::Entropy { omega } => vec![Some(entropy_map_backward(omega, g)?)],
        Op::Fuse { alpha, flows } => {
            let (da, df) = fuse_hypotheses_backward(alpha, flows, g)?;
            vec![Some(da), Some(df)]
        }
        Op::ConvexCombine { flow, mask, factor } => {
            let (df, dm) = convex_combine_backward(flow, mask, *factor, g)?;
            vec![Some(df), Some(dm)]
        }
        Op::L1Loss { pred, target, mask } => {
            let scale = g.data()[0];
            let mut d = l1_loss_backward(pred, target, mask.as_deref())?;
            d.scale_in_place(scale);
            vec![Some(d)]
        }
        Op::WeightedSum { weights } => {
            let scale = g.data()[0];
            vec![Some(weights.map(|v| v * scale))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(Tensor::from_fn(&[2, 3], |i| i as f64)));
        let s = tape.sum(&x);
        let g = tape.backward(&s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g["x"], Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn replay_without_reset_fails() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(Tensor::scalar(2.0)));
        let s = tape.sum(&x);
        tape.backward(&s, Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(&s, Tensor::scalar(1.0)),
            Err(Error::TapeConsumed)
        ));
        tape.reset();
        let x = tape.param("x", Arc::new(Tensor::scalar(2.0)));
        let s = tape.scale(&x, 3.0);
        let g = tape.backward(&s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g["x"].data(), &[3.0]);
    }

    #[test]
    fn constants_get_no_slot_and_unused_params_get_zero() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let p = tape.param("p", Arc::new(Tensor::full(&[3], 1.0)));
        let _unused = tape.param("unused", Arc::new(Tensor::full(&[2], 1.0)));
        let s = tape.add(&c, &p).unwrap();
        let s = tape.sum(&s);
        let g = tape.backward(&s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g["unused"], Tensor::zeros(&[2]));
        assert_eq!(g["p"], Tensor::full(&[3], 1.0));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let p = tape.param("p", Arc::new(Tensor::full(&[2], 1.5)));
        let again = tape.param("p", Arc::new(Tensor::full(&[2], 99.0)));
        assert_eq!(again.value().data(), &[1.5, 1.5]);
        let s = tape.add(&p, &again).unwrap();
        let s = tape.sum(&s);
        let g = tape.backward(&s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g["p"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let p = tape.param("p", Arc::new(Tensor::full(&[2], 1.0)));
        let y = tape.scale(&p, 2.0);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let mut tape = Tape::inference().with_precision(Precision::F32);
        let x = tape.constant(Tensor::scalar(0.1));
        let y = tape.scale(&x, 1.0);
        assert_eq!(y.value().data()[0], 0.1f32 as f64);
    }
}
