use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slope used by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|x| if x >= 0.0 { x } else { slope * x })
}

pub fn leaky_relu_backward(input: &Tensor, slope: f64, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x < 0.0 {
            *d *= slope;
        }
    }
    g
}

/// `(outer, axis extent, inner)` view of a tensor around one axis.
pub(crate) fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis("softmax", input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                max = max.max(x[at(k)]);
            }
            let mut sum = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `dx = y * (dy - sum(y * dy))` along `axis`, given the softmax output `y`.
pub fn softmax_backward(output: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = split_axis("softmax_backward", output.shape(), axis)?;
    grad_out.expect_shape("softmax_backward", "upstream gradient", output.shape())?;
    let (y, dy) = (output.data(), grad_out.data());
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let dot: f64 = (0..n).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..n {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}
