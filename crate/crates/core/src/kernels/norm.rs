use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel statistics saved by [`instance_norm2d_forward`] for backward.
#[derive(Debug, Clone)]
pub struct InstanceNormCache {
    /// `(x - mean) / sqrt(var + eps)`, same shape as the input.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

fn check(input: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<(usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape(
            "instance_norm2d",
            "input rank",
            ">= 2",
            input.rank(),
        ));
    }
    let c = input.dim(0);
    gain.expect_shape("instance_norm2d", "gain", &[c])?;
    shift.expect_shape("instance_norm2d", "shift", &[c])?;
    Ok((c, input.len() / c))
}

/// Instance normalization of a `C x H x W` tensor: every channel plane is
/// shifted to zero mean and scaled to unit (biased) variance, then
/// `gain * x + shift` is applied per channel.
pub fn instance_norm2d(input: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    instance_norm2d_forward(input, gain, shift, eps).map(|(y, _)| y)
}

pub fn instance_norm2d_forward(
    input: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, InstanceNormCache)> {
    let (c, plane) = check(input, gain, shift)?;
    let mut normalized = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    let mut inv_std = vec![0.0; c];
    normalized
        .par_chunks_mut(plane)
        .zip(out.par_chunks_mut(plane))
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(ch, ((xhat, y), istd))| {
            let x = &input.data()[ch * plane..(ch + 1) * plane];
            let mean = x.iter().sum::<f64>() / plane as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            *istd = 1.0 / (var + eps).sqrt();
            let (g, b) = (gain.data()[ch], shift.data()[ch]);
            for i in 0..plane {
                xhat[i] = (x[i] - mean) * *istd;
                y[i] = g * xhat[i] + b;
            }
        });
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        InstanceNormCache {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
        },
    ))
}

/// Returns `(d input, d gain, d shift)`.
pub fn instance_norm2d_backward(
    cache: &InstanceNormCache,
    gain: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xhat = &cache.normalized;
    grad_out.expect_shape(
        "instance_norm2d_backward",
        "upstream gradient",
        xhat.shape(),
    )?;
    let c = xhat.dim(0);
    let plane = xhat.len() / c;
    let n = plane as f64;
    let mut dx = vec![0.0; xhat.len()];
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    dx.par_chunks_mut(plane)
        .zip(dgain.par_iter_mut().zip(dshift.par_iter_mut()))
        .enumerate()
        .for_each(|(ch, (dxc, (dg, ds)))| {
            let xh = &xhat.data()[ch * plane..(ch + 1) * plane];
            let dy = &grad_out.data()[ch * plane..(ch + 1) * plane];
            let sum_dy: f64 = dy.iter().sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            *dg = sum_dy_xh;
            *ds = sum_dy;
            let scale = gain.data()[ch] * cache.inv_std[ch] / n;
            for i in 0..plane {
                dxc[i] = scale * (n * dy[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        });
    Ok((
        Tensor::new(xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgain)?,
        Tensor::new(vec![c], dshift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_collapses_to_shift() {
        let x = Tensor::full(&[2, 4, 4], 3.5);
        let y = instance_norm2d(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = instance_norm2d(
            &x,
            &Tensor::full(&[2], 2.0),
            &Tensor::full(&[2], 0.25),
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 7, 5], -4.0, 9.0, &mut rng);
        let y = instance_norm2d(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5).unwrap();
        for ch in y.data().chunks(35) {
            let mean = ch.iter().sum::<f64>() / 35.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 35.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }
}
