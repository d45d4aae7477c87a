//! Flow hypotheses from interpolation weights, their entropy, and the
//! weighted fusion of hypotheses into one flow field.

use crate::cost_volume::{displacement_table, CostVolumeSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard inside the logarithm of [`entropy_map`].
pub const ENTROPY_EPS: f64 = 1e-12;

fn check_omega(op: &'static str, omega: &Tensor, specs: &[CostVolumeSpec]) -> Result<()> {
    omega.expect_rank(op, "omega", 4)?;
    if omega.dim(0) != specs.len() {
        return Err(Error::shape(
            op,
            "omega axis 0 (dilations)",
            specs.len(),
            omega.dim(0),
        ));
    }
    for (d, s) in specs.iter().enumerate() {
        if s.candidates() != omega.dim(1) {
            return Err(Error::shape(
                op,
                format!("omega axis 1 (candidates of {s}, dilation {d})"),
                s.candidates(),
                omega.dim(1),
            ));
        }
    }
    Ok(())
}

/// `flows[d] = sum_i omega[d, i] * displacement_table(spec_d)[i]`, per
/// position. `omega` is `[D, D', h, w]`, the result `[D, 2, h, w]` in input
/// pixels (channel 0 horizontal, channel 1 vertical).
pub fn flow_hypotheses(omega: &Tensor, specs: &[CostVolumeSpec]) -> Result<Tensor> {
    check_omega("flow_hypotheses", omega, specs)?;
    let (nd, nc, h, w) = (omega.dim(0), omega.dim(1), omega.dim(2), omega.dim(3));
    let plane = h * w;
    let mut out = Tensor::zeros(&[nd, 2, h, w]);
    for (d, spec) in specs.iter().enumerate() {
        let table = displacement_table(spec);
        let om = &omega.data()[d * nc * plane..(d + 1) * nc * plane];
        let dst = &mut out.data_mut()[d * 2 * plane..(d + 1) * 2 * plane];
        let (du, dv) = dst.split_at_mut(plane);
        for (i, &(u, v)) in table.iter().enumerate() {
            let (u, v) = (u as f64, v as f64);
            for p in 0..plane {
                let wgt = om[i * plane + p];
                du[p] += wgt * u;
                dv[p] += wgt * v;
            }
        }
    }
    Ok(out)
}

pub fn flow_hypotheses_backward(
    specs: &[CostVolumeSpec],
    omega_shape: &[usize],
    grad: &Tensor,
) -> Result<Tensor> {
    let (nd, nc, h, w) = (
        omega_shape[0],
        omega_shape[1],
        omega_shape[2],
        omega_shape[3],
    );
    grad.expect_shape(
        "flow_hypotheses_backward",
        "upstream gradient",
        &[nd, 2, h, w],
    )?;
    let plane = h * w;
    let mut out = Tensor::zeros(omega_shape);
    for (d, spec) in specs.iter().enumerate() {
        let g = &grad.data()[d * 2 * plane..(d + 1) * 2 * plane];
        let dst = &mut out.data_mut()[d * nc * plane..(d + 1) * nc * plane];
        for (i, &(u, v)) in displacement_table(spec).iter().enumerate() {
            let (u, v) = (u as f64, v as f64);
            for p in 0..plane {
                dst[i * plane + p] = g[p] * u + g[plane + p] * v;
            }
        }
    }
    Ok(out)
}

/// `-sum_i omega_i ln(omega_i + eps)` over axis 1, in nats: `[D, h, w]`.
pub fn entropy_map(omega: &Tensor) -> Result<Tensor> {
    omega.expect_rank("entropy_map", "omega", 4)?;
    let (nd, nc, h, w) = (omega.dim(0), omega.dim(1), omega.dim(2), omega.dim(3));
    let plane = h * w;
    let mut out = Tensor::zeros(&[nd, h, w]);
    for d in 0..nd {
        for i in 0..nc {
            for p in 0..plane {
                let o = omega.data()[(d * nc + i) * plane + p];
                out.data_mut()[d * plane + p] -= o * (o + ENTROPY_EPS).ln();
            }
        }
    }
    Ok(out)
}

pub fn entropy_map_backward(omega: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (nd, nc, h, w) = (omega.dim(0), omega.dim(1), omega.dim(2), omega.dim(3));
    grad.expect_shape("entropy_map_backward", "upstream gradient", &[nd, h, w])?;
    let plane = h * w;
    let mut out = Tensor::zeros(omega.shape());
    for d in 0..nd {
        for i in 0..nc {
            for p in 0..plane {
                let k = (d * nc + i) * plane + p;
                let o = omega.data()[k];
                out.data_mut()[k] =
                    -grad.data()[d * plane + p] * ((o + ENTROPY_EPS).ln() + o / (o + ENTROPY_EPS));
            }
        }
    }
    Ok(out)
}

/// `sum_d alpha[d] * flows[d]` per position: `[D, h, w] x [D, 2, h, w] -> [2, h, w]`.
pub fn fuse_hypotheses(alpha: &Tensor, flows: &Tensor) -> Result<Tensor> {
    alpha.expect_rank("fuse_hypotheses", "alpha", 3)?;
    let (nd, h, w) = (alpha.dim(0), alpha.dim(1), alpha.dim(2));
    flows.expect_shape("fuse_hypotheses", "flows", &[nd, 2, h, w])?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[2, h, w]);
    for d in 0..nd {
        for c in 0..2 {
            for p in 0..plane {
                out.data_mut()[c * plane + p] +=
                    alpha.data()[d * plane + p] * flows.data()[(d * 2 + c) * plane + p];
            }
        }
    }
    Ok(out)
}

/// Returns `(d alpha, d flows)`.
pub fn fuse_hypotheses_backward(
    alpha: &Tensor,
    flows: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (nd, h, w) = (alpha.dim(0), alpha.dim(1), alpha.dim(2));
    grad.expect_shape("fuse_hypotheses_backward", "upstream gradient", &[2, h, w])?;
    let plane = h * w;
    let mut da = Tensor::zeros(alpha.shape());
    let mut df = Tensor::zeros(flows.shape());
    for d in 0..nd {
        for c in 0..2 {
            for p in 0..plane {
                let g = grad.data()[c * plane + p];
                da.data_mut()[d * plane + p] += g * flows.data()[(d * 2 + c) * plane + p];
                df.data_mut()[(d * 2 + c) * plane + p] = g * alpha.data()[d * plane + p];
            }
        }
    }
    Ok((da, df))
}
