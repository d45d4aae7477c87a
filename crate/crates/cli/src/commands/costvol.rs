use std::path::{Path, PathBuf};

use dcvnet::cost_volume::{
    build_cost_volume, displacement_table, patch_features, CostVolumeSpec, CANONICAL_SPECS,
};
use dcvnet::encoder::encode;
use dcvnet::flow::decode_image;
use dcvnet::params::ModelParams;
use dcvnet::Tensor;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{write_file, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DCV1";

pub struct CostvolArgs {
    pub image1: PathBuf,
    pub image2: PathBuf,
    pub spec: CostVolumeSpec,
    /// `(row, col)` in input pixels.
    pub position: (usize, usize),
    pub out: PathBuf,
    /// Learned encoder features instead of raw pixel patches.
    pub checkpoint: Option<PathBuf>,
}

pub fn manifest_path(args: &CostvolArgs) -> PathBuf {
    let mut s = args.out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn valid_specs() -> String {
    CANONICAL_SPECS
        .iter()
        .map(|s| format!("{},{}", s.stride, s.dilation))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `S,D` or `s=S,d=D` and checks it is one of the canonical seven.
pub fn parse_spec(text: &str) -> Result<CostVolumeSpec, String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let num =
        |p: &str, key: &str| -> Option<usize> { p.strip_prefix(key).unwrap_or(p).parse().ok() };
    let parsed = match parts.as_slice() {
        [s, d] => num(s, "s=").zip(num(d, "d=")),
        _ => None,
    };
    let invalid = || {
        format!(
            "spec {text:?} is not one of the canonical volumes; valid S,D: {}",
            valid_specs()
        )
    };
    let (stride, dilation) = parsed.ok_or_else(invalid)?;
    CANONICAL_SPECS
        .iter()
        .find(|s| s.stride == stride && s.dilation == dilation)
        .copied()
        .ok_or_else(invalid)
}

/// Parses `ROW,COL`.
pub fn parse_position(text: &str) -> Result<(usize, usize), String> {
    let (r, c) = text
        .split_once(',')
        .ok_or_else(|| format!("position {text:?} is not ROW,COL"))?;
    let p = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("position {text:?} is not ROW,COL"))
    };
    Ok((p(r)?, p(c)?))
}

/// Debug dump: magic, five little-endian u32 extents, then f64 LE values.
pub fn dump_bytes(slice: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * slice.len());
    out.extend_from_slice(MAGIC);
    for &d in slice.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in slice.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads back a debug dump: `(shape, values)`.
pub fn parse_dump(bytes: &[u8]) -> Option<([usize; 5], Vec<f64>)> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return None;
    }
    let mut shape = [0usize; 5];
    for (k, s) in shape.iter_mut().enumerate() {
        *s = u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().ok()?) as usize;
    }
    let n: usize = shape.iter().product();
    let body = &bytes[24..];
    if body.len() != 8 * n {
        return None;
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some((shape, values))
}

fn load_image(m: &mut RunManifest, path: &Path) -> CliResult<Tensor> {
    let bytes = m.read_input(path)?;
    Ok(decode_image(&bytes, path)?)
}

pub struct Dump {
    /// `[C, U, V, 1, 1]`.
    pub slice: Tensor,
    pub cell: (usize, usize),
    pub argmax: (i64, i64),
}

pub fn compute(args: &CostvolArgs, m: &mut RunManifest) -> CliResult<Dump> {
    let spec = args.spec;
    let i1 = load_image(m, &args.image1)?;
    let i2 = load_image(m, &args.image2)?;
    if i1.shape() != i2.shape() {
        return Err(CliError::input("images differ in size"));
    }
    let (f1, f2) = match &args.checkpoint {
        Some(path) => {
            let bytes = m.read_input(path)?;
            let params = ModelParams::from_bytes(&bytes, &dcvnet::decoder::model_layout(), path)?;
            let (a, b) = (encode(&i1, &params)?, encode(&i2, &params)?);
            if spec.stride == 2 {
                (a.f_s2, b.f_s2)
            } else {
                (a.f_s8, b.f_s8)
            }
        }
        None => (
            patch_features(&i1, spec.stride)?,
            patch_features(&i2, spec.stride)?,
        ),
    };
    let (fh, fw) = (f1.dim(1), f1.dim(2));
    let (row, col) = args.position;
    let cell = (row / spec.stride, col / spec.stride);
    if cell.0 >= fh || cell.1 >= fw {
        return Err(CliError::input(format!(
            "position ({row},{col}) is outside the {}x{} image",
            i1.dim(2),
            i1.dim(1)
        )));
    }
    let vol = build_cost_volume(&f1, &f2, &spec)?;
    let (c, win) = (spec.groups, spec.window());
    let slice = Tensor::from_fn(&[c, win, win, 1, 1], |k| {
        let (g, n) = (k / (win * win), k % (win * win));
        vol.data.at(&[g, n / win, n % win, cell.0, cell.1])
    });
    let table = displacement_table(&spec);
    let best = (0..win * win)
        .map(|n| {
            (
                n,
                (0..c).map(|g| slice.data()[g * win * win + n]).sum::<f64>(),
            )
        })
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (n, s)| if s > acc.1 { (n, s) } else { acc },
        );
    Ok(Dump {
        slice,
        cell,
        argmax: table[best.0],
    })
}

pub fn run(args: &CostvolArgs, m: &mut RunManifest) -> CliResult<()> {
    m.config = json!({
        "image1": args.image1.display().to_string(),
        "image2": args.image2.display().to_string(),
        "spec": {"stride": args.spec.stride, "dilation": args.spec.dilation},
        "position": [args.position.0, args.position.1],
        "features": if args.checkpoint.is_some() { "encoder" } else { "patches" },
        "out": args.out.display().to_string(),
    });
    let dump = compute(args, m)?;
    write_file(&args.out, &dump_bytes(&dump.slice))?;
    m.outputs = vec![args.out.display().to_string()];

    let spec = args.spec;
    let win = spec.window();
    let table = displacement_table(&spec);
    println!(
        "spec s={} d={} k={} C={}; feature cell ({}, {}); candidate (u,v) px and summed similarity:",
        spec.stride, spec.dilation, spec.radius, spec.groups, dump.cell.0, dump.cell.1
    );
    for i in 0..win {
        let row: Vec<String> = (0..win)
            .map(|j| {
                let n = i * win + j;
                let s: f64 = (0..spec.groups)
                    .map(|g| dump.slice.data()[g * win * win + n])
                    .sum();
                let (u, v) = table[n];
                format!("({u:>4},{v:>4}) {s:>6.3}")
            })
            .collect();
        println!("{}", row.join("  "));
    }
    println!(
        "argmax displacement: ({}, {})",
        dump.argmax.0, dump.argmax.1
    );
    Ok(())
}
