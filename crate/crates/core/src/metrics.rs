//! End-point error and the KITTI outlier rate.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

/// Outlier thresholds: absolute px and fraction of the true magnitude.
pub const FL_ABS_PX: f64 = 3.0;
pub const FL_REL: f64 = 0.05;

fn check(op: &'static str, pred: &FlowField, gt: &FlowField) -> Result<()> {
    pred.data.expect_shape(op, "prediction", gt.data.shape())
}

fn is_valid(pred: &FlowField, gt: &FlowField, y: usize, x: usize) -> bool {
    gt.is_valid(y, x) && pred.is_valid(y, x)
}

/// Per-pixel `|pred - gt|`, `[H, W]`.
pub fn epe_map(pred: &FlowField, gt: &FlowField) -> Result<Tensor> {
    check("epe", pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (pu, pv) = pred.at(y, x);
            let (gu, gv) = gt.at(y, x);
            out.set(&[y, x], (pu - gu).hypot(pv - gv));
        }
    }
    Ok(out)
}

/// Mean end-point error over pixels valid in both fields. Returns an error
/// when no pixel is valid.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let map = epe_map(pred, gt)?;
    let w = gt.width();
    let (sum, n) = map
        .data()
        .iter()
        .enumerate()
        .filter(|(p, _)| is_valid(pred, gt, p / w, p % w))
        .fold((0.0, 0usize), |(s, n), (_, e)| (s + e, n + 1));
    if n == 0 {
        return Err(Error::invalid("epe", "no valid pixels"));
    }
    Ok(sum / n as f64)
}

/// Percentage of valid pixels whose error exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn fl_all(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let map = epe_map(pred, gt)?;
    let w = gt.width();
    let mut outliers = 0usize;
    let mut n = 0usize;
    for (p, &e) in map.data().iter().enumerate() {
        let (y, x) = (p / w, p % w);
        if !is_valid(pred, gt, y, x) {
            continue;
        }
        n += 1;
        let (gu, gv) = gt.at(y, x);
        if e > FL_ABS_PX && e > FL_REL * gu.hypot(gv) {
            outliers += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("fl_all", "no valid pixels"));
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let gt = FlowField::constant(4, 5, 1.0, 2.0);
        let pred = FlowField::constant(4, 5, 4.0, 6.0);
        assert_eq!(epe(&pred, &gt).unwrap(), 5.0);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn outlier_rule_needs_both_arms() {
        let gt = FlowField::constant(1, 1, 100.0, 0.0);
        assert_eq!(
            fl_all(&FlowField::constant(1, 1, 102.0, 0.0), &gt).unwrap(),
            0.0
        );
        assert_eq!(
            fl_all(&FlowField::constant(1, 1, 104.0, 0.0), &gt).unwrap(),
            0.0
        );
        let gt = FlowField::constant(1, 1, 10.0, 0.0);
        assert_eq!(
            fl_all(&FlowField::constant(1, 1, 14.0, 0.0), &gt).unwrap(),
            100.0
        );
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let gt = FlowField::constant(1, 2, 0.0, 0.0)
            .with_mask(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let pred = FlowField::new(Tensor::new(vec![2, 1, 2], vec![3.0, 50.0, 4.0, 50.0]).unwrap())
            .unwrap();
        assert_eq!(epe(&pred, &gt).unwrap(), 5.0);
        assert_eq!(fl_all(&pred, &gt).unwrap(), 100.0);
    }
}
