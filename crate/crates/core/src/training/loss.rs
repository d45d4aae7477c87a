//! Mask-aware L1 flow loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<usize> {
    pred.expect_rank("l1_loss", "prediction", 3)?;
    if pred.dim(0) != 2 {
        return Err(Error::shape(
            "l1_loss",
            "prediction axis 0 (flow components)",
            2,
            pred.dim(0),
        ));
    }
    target.expect_shape("l1_loss", "target", pred.shape())?;
    let plane = pred.dim(1) * pred.dim(2);
    match mask {
        Some(m) => {
            m.expect_shape("l1_loss", "mask", &pred.shape()[1..])?;
            Ok(m.data().iter().filter(|&&v| v > 0.0).count())
        }
        None => Ok(plane),
    }
}

#[inline]
fn valid(mask: Option<&Tensor>, p: usize) -> bool {
    mask.is_none_or(|m| m.data()[p] > 0.0)
}

/// Mean of `|pred - target|` over valid pixels and both channels; 0 when no
/// pixel is valid.
pub fn l1_loss_value(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    let n = check(pred, target, mask)?;
    if n == 0 {
        return Ok(0.0);
    }
    let plane = pred.dim(1) * pred.dim(2);
    let mut acc = 0.0;
    for (k, (a, b)) in pred.data().iter().zip(target.data()).enumerate() {
        if valid(mask, k % plane) {
            acc += (a - b).abs();
        }
    }
    Ok(acc / (2 * n) as f64)
}

/// Subgradient of [`l1_loss_value`] w.r.t. `pred` (0 where `pred == target`).
pub fn l1_loss_backward(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let n = check(pred, target, mask)?;
    let plane = pred.dim(1) * pred.dim(2);
    let mut out = Tensor::zeros(pred.shape());
    if n == 0 {
        return Ok(out);
    }
    let scale = 1.0 / (2 * n) as f64;
    for (k, (a, b)) in pred.data().iter().zip(target.data()).enumerate() {
        if valid(mask, k % plane) {
            let d = a - b;
            out.data_mut()[k] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_error_gives_one() {
        let gt = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let pred = Tensor::from_fn(&[2, 3, 3], |i| i as f64 + if i < 9 { 1.0 } else { -1.0 });
        assert_eq!(l1_loss_value(&pred, &gt, None).unwrap(), 1.0);
        assert_eq!(l1_loss_value(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn mask_excludes_pixels() {
        let gt = Tensor::zeros(&[2, 1, 2]);
        let pred = Tensor::new(vec![2, 1, 2], vec![1.0, 100.0, 3.0, 100.0]).unwrap();
        let mask = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(l1_loss_value(&pred, &gt, Some(&mask)).unwrap(), 2.0);
        let g = l1_loss_backward(&pred, &gt, Some(&mask)).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0, 0.5, 0.0]);
    }
}
