use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn planes(op: &'static str, shape: &[usize], factor: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, "input rank", ">= 2", shape.len()));
    }
    if factor == 0 {
        return Err(Error::invalid(op, "factor must be >= 1"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % factor != 0 {
        return Err(Error::shape(
            op,
            "height",
            format!("multiple of {factor}"),
            h,
        ));
    }
    if w % factor != 0 {
        return Err(Error::shape(
            op,
            "width",
            format!("multiple of {factor}"),
            w,
        ));
    }
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// Average-pools the last two (spatial) axes over `factor x factor` blocks.
pub fn spatial_subsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (lead, h, w) = planes("spatial_subsample", input.shape(), factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let x = input.data();
    let mut out = vec![0.0; lead * oh * ow];
    for p in 0..lead {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &src[(oy * factor + dy) * w + ox * factor..][..factor];
                    s += row.iter().sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

pub fn spatial_subsample_backward(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (lead, h, w) = planes("spatial_subsample_backward", input_shape, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let g = grad_out.data();
    if g.len() != lead * oh * ow {
        return Err(Error::shape(
            "spatial_subsample_backward",
            "upstream gradient length",
            lead * oh * ow,
            g.len(),
        ));
    }
    let mut dx = vec![0.0; lead * h * w];
    for p in 0..lead {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = g[(p * oh + y / factor) * ow + x / factor] * norm;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(spatial_subsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[3, 8, 12], -1.25);
        let y = spatial_subsample(&x, 4).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn mean_of_ramp() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let y = spatial_subsample(&x, 4).unwrap();
        assert_eq!(y.data(), &[7.5]);
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let err = spatial_subsample(&Tensor::zeros(&[1, 6, 8]), 4).unwrap_err();
        assert!(err.to_string().contains("height"));
    }
}
