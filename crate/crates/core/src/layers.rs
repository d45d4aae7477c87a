//! Parameterized layers: look up named weights and run the kernel on a tape.

use crate::error::Result;
use crate::kernels::{Conv2dSpec, Conv3dSpec};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};

/// Instance-norm epsilon used throughout the model.
pub const NORM_EPS: f64 = 1e-5;

fn param(tape: &mut Tape, params: &ModelParams, name: &str, suffix: &str) -> Result<Var> {
    let key = format!("{name}.{suffix}");
    let value = params.get(&key)?.clone();
    Ok(tape.param(&key, value))
}

pub(crate) fn conv2d(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: &Var,
    spec: &Conv2dSpec,
) -> Result<Var> {
    let w = param(tape, params, name, "w")?;
    let b = param(tape, params, name, "b")?;
    tape.conv2d(x, &w, &b, spec)
}

pub(crate) fn conv3d(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: &Var,
    spec: &Conv3dSpec,
) -> Result<Var> {
    let w = param(tape, params, name, "w")?;
    let b = param(tape, params, name, "b")?;
    tape.conv3d(x, &w, &b, spec)
}

pub(crate) fn conv_transpose3d(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: &Var,
    spec: &Conv3dSpec,
    output_padding: [usize; 3],
) -> Result<Var> {
    let w = param(tape, params, name, "w")?;
    let b = param(tape, params, name, "b")?;
    tape.conv_transpose3d(x, &w, &b, spec, output_padding)
}

pub(crate) fn instance_norm(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: &Var,
) -> Result<Var> {
    let g = param(tape, params, name, "gain")?;
    let s = param(tape, params, name, "shift")?;
    tape.instance_norm2d(x, &g, &s, NORM_EPS)
}
