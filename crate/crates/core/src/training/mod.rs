//! Desk-scale training: loss, schedule, optimizer, augmentation and the
//! toy training loop.

pub mod loss;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, forward_on_tape};
use crate::encoder::ImagePair;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::metrics;
use crate::params::ModelParams;
use crate::synthetic::{self, SyntheticKind};
use crate::tape::{Gradients, Precision, Tape};
use crate::tensor::Tensor;

pub use loss::{l1_loss_backward, l1_loss_value};

/// Every knob of a toy training run. Unknown keys are rejected when parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Synthetic dataset: number of pairs, frame size, largest translation.
    pub pairs: usize,
    pub image_size: usize,
    pub max_translation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 4e-4,
            warmup_fraction: 0.05,
            start_div: 25.0,
            final_div: 1e4,
            steps: 1500,
            batch_size: 1,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            seed: 0,
            crop_height: 64,
            crop_width: 64,
            flip_h_prob: 0.5,
            flip_v_prob: 0.1,
            pairs: 8,
            image_size: 64,
            max_translation: 16.0,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines (`#` starts a comment); missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::invalid("TrainConfig", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("TrainConfig", reason));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!(
                "warmup_fraction must be in (0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.pairs == 0 {
            return bad("steps, batch_size and pairs must be >= 1".into());
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("start_div", self.start_div),
            ("final_div", self.final_div),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if !self.image_size.is_multiple_of(8) || self.image_size == 0 {
            return bad(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            ));
        }
        check_crop(self, self.image_size, self.image_size)
    }
}

fn check_crop(cfg: &TrainConfig, h: usize, w: usize) -> Result<()> {
    let (ch, cw) = (cfg.crop_height, cfg.crop_width);
    if ch == 0 || cw == 0 || ch % 8 != 0 || cw % 8 != 0 || ch > h || cw > w {
        return Err(Error::invalid(
            "augment",
            format!("crop {ch}x{cw} must be a positive multiple of 8 within {h}x{w}"),
        ));
    }
    Ok(())
}

/// Step of the warmup peak: the linear ramp covers `warmup_fraction` of
/// the run, ending at step `warmup_fraction * steps - 1`.
fn warmup_end(cfg: &TrainConfig) -> f64 {
    (cfg.warmup_fraction * cfg.steps as f64 - 1.0).max(0.0)
}

/// OneCycle with linear phases: `peak / start_div` rising to `peak` at the
/// end of warmup, then falling to `peak / final_div` at the last step.
pub fn onecycle_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::invalid(
            "onecycle_lr",
            format!("step {step} outside [0, {})", cfg.steps),
        ));
    }
    let peak = cfg.peak_lr;
    let start = peak / cfg.start_div;
    let end = peak / cfg.final_div;
    let s = step as f64;
    let up = warmup_end(cfg);
    let last = (cfg.steps - 1) as f64;
    Ok(if s <= up {
        if up == 0.0 {
            peak
        } else {
            start + (peak - start) * s / up
        }
    } else {
        let t = (s - up) / (last - up);
        peak + (end - peak) * t
    })
}

/// Global L2 norm over every gradient.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm observed before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Weight decay applies to convolution weights only.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// One AdamW update with bias correction and decoupled decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        g.expect_shape("adamw_step", name, p.shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let mut p = params.get(name)?.as_ref().clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = if decays(name) {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi = *pi * decay - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
        params.set(name, p)?;
    }
    Ok(())
}

fn flip_axis(t: &Tensor, axis_from_end: usize) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let w = shape[rank - 1];
    let h = shape[rank - 2];
    let mut out = t.clone();
    let plane = h * w;
    for (k, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        let src = &t.data()[k * plane..(k + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if axis_from_end == 0 {
                    (y, w - 1 - x)
                } else {
                    (h - 1 - y, x)
                };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

fn crop(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let rank = t.rank();
    let (h, w) = (t.dim(rank - 2), t.dim(rank - 1));
    let lead = t.len() / (h * w);
    let mut shape = t.shape().to_vec();
    shape[rank - 2] = ch;
    shape[rank - 1] = cw;
    let mut data = Vec::with_capacity(lead * ch * cw);
    for k in 0..lead {
        for y in y0..y0 + ch {
            let row = (k * h + y) * w;
            data.extend_from_slice(&t.data()[row + x0..row + x0 + cw]);
        }
    }
    Tensor::new(shape, data).expect("crop extents")
}

/// Random synchronized crop and flips. A horizontal flip mirrors both images
/// and the field and negates `u`; a vertical flip likewise negates `v`.
pub fn augment<R: Rng + ?Sized>(
    pair: &ImagePair,
    gt: &FlowField,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ImagePair, FlowField)> {
    let (h, w) = pair.size();
    check_crop(cfg, h, w)?;
    let (ch, cw) = (cfg.crop_height, cfg.crop_width);
    let y0 = if ch < h {
        rng.random_range(0..=h - ch)
    } else {
        0
    };
    let x0 = if cw < w {
        rng.random_range(0..=w - cw)
    } else {
        0
    };
    let flip_h = rng.random_bool(cfg.flip_h_prob);
    let flip_v = rng.random_bool(cfg.flip_v_prob);

    let mut first = crop(&pair.first, y0, x0, ch, cw);
    let mut second = crop(&pair.second, y0, x0, ch, cw);
    let mut flow = crop(&gt.data, y0, x0, ch, cw);
    let mut mask = gt.mask.as_ref().map(|m| crop(m, y0, x0, ch, cw));
    let plane = ch * cw;
    for (flip, axis) in [(flip_h, 0usize), (flip_v, 1usize)] {
        if !flip {
            continue;
        }
        first = flip_axis(&first, axis);
        second = flip_axis(&second, axis);
        flow = flip_axis(&flow, axis);
        flow.data_mut()[axis * plane..(axis + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = -*v);
        mask = mask.map(|m| flip_axis(&m, axis));
    }
    let mut field = FlowField::new(flow)?;
    if let Some(m) = mask {
        field = field.with_mask(m)?;
    }
    Ok((ImagePair::new(first, second)?, field))
}

/// Constant-translation pairs for the toy run, deterministic per seed.
pub fn toy_dataset(cfg: &TrainConfig) -> Result<Vec<(ImagePair, FlowField)>> {
    (0..cfg.pairs)
        .map(|i| {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            synthetic::synthetic_pair(
                SyntheticKind::Translation,
                cfg.max_translation,
                cfg.image_size,
                cfg.image_size,
                seed,
            )
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<StepRecord>,
    /// Mean EPE of the final model over the (unaugmented) training pairs.
    pub final_epe: f64,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// L1 loss and parameter gradients for one example.
pub fn loss_and_grads(
    params: &ModelParams,
    pair: &ImagePair,
    gt: &FlowField,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, pair)?;
    let loss = tape.l1_loss(&out.flow_full, &gt.data, gt.mask.as_ref())?;
    let value = loss.value().data()[0];
    let grads = tape.backward(&loss, Tensor::scalar(1.0))?;
    Ok((value, grads))
}

/// Mean EPE of `params` over `data`.
pub fn evaluate(params: &ModelParams, data: &[(ImagePair, FlowField)]) -> Result<f64> {
    let mut total = 0.0;
    for (pair, gt) in data {
        let pred = decoder::forward_with_precision(pair, params, Precision::F64)?;
        let field = FlowField::new(pred.fusion.flow_full)?;
        total += metrics::epe(&field, gt)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains from a fresh initialization seeded by `cfg.seed`. `on_step` sees
/// every record as it is produced. Aborts with a numerical error as soon as
/// a loss or gradient norm is non-finite.
pub fn train_toy(
    data: &[(ImagePair, FlowField)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_toy", "empty dataset"));
    }
    let mut params = ModelParams::init(cfg.seed);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let t = Instant::now();
        let mut batch_grads: Option<Gradients> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let (pair, gt) = augment(&data[idx].0, &data[idx].1, cfg, &mut rng)?;
            let (loss, grads) = loss_and_grads(&params, &pair, &gt)?;
            batch_loss += loss;
            match &mut batch_grads {
                None => batch_grads = Some(grads),
                Some(acc) => {
                    for (k, g) in grads {
                        acc.get_mut(&k).expect("same parameter set").add_assign(&g);
                    }
                }
            }
        }
        let mut grads = batch_grads.expect("batch_size >= 1");
        let inv = 1.0 / cfg.batch_size as f64;
        grads.values_mut().for_each(|g| g.scale_in_place(inv));
        let loss = batch_loss * inv;
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss {loss}, gradient norm {norm}"
            )));
        }
        let lr = onecycle_lr(step, cfg)?;
        adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
        let rec = StepRecord {
            step,
            lr,
            loss,
            grad_norm: norm,
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&rec);
        records.push(rec);
    }
    let final_epe = evaluate(&params, data)?;
    Ok(TrainOutcome {
        params,
        records,
        final_epe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::default();
        assert_eq!(onecycle_lr(0, &cfg).unwrap(), 4e-4 / 25.0);
        assert_eq!(onecycle_lr(74, &cfg).unwrap(), 4e-4);
        assert!((onecycle_lr(1499, &cfg).unwrap() - 4e-8).abs() < 1e-12);
        assert!(onecycle_lr(1500, &cfg).is_err());
    }

    #[test]
    fn clip_three_four() {
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = TrainConfig::parse("steps = 10\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let cfg = TrainConfig::parse("# comment\nsteps = 10\npeak_lr = 1e-3\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.peak_lr, 1e-3);
        assert_eq!(cfg.batch_size, 1);
    }

    #[test]
    fn horizontal_flip_negates_u() {
        let pair = ImagePair::new(Tensor::zeros(&[3, 8, 8]), Tensor::zeros(&[3, 8, 8])).unwrap();
        let gt = FlowField::constant(8, 8, 5.0, 0.0);
        let cfg = TrainConfig {
            crop_height: 8,
            crop_width: 8,
            flip_h_prob: 1.0,
            flip_v_prob: 0.0,
            ..TrainConfig::default()
        };
        let (_, f) = augment(&pair, &gt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f, FlowField::constant(8, 8, -5.0, 0.0));
    }
}
