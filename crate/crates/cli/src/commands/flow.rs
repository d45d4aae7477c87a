use std::path::{Path, PathBuf};

use dcvnet::decoder::forward_with_precision;
use dcvnet::encoder::ImagePair;
use dcvnet::flow::{decode_image, write_color_png, write_flo, FlowField};
use dcvnet::params::ModelParams;
use serde_json::json;

use super::Globals;
use crate::manifest::{Padding, RunManifest};
use crate::pad::{crop_top_left, next_multiple, reflect_pad};
use crate::{CliError, CliResult};

pub struct FlowArgs {
    pub image1: PathBuf,
    pub image2: PathBuf,
    pub checkpoint: PathBuf,
    pub out_prefix: PathBuf,
    pub auto_pad: bool,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(args: &FlowArgs) -> PathBuf {
    with_suffix(&args.out_prefix, ".manifest.json")
}

pub fn run(args: &FlowArgs, g: &Globals, m: &mut RunManifest) -> CliResult<()> {
    m.config = json!({
        "image1": args.image1.display().to_string(),
        "image2": args.image2.display().to_string(),
        "checkpoint": args.checkpoint.display().to_string(),
        "out_prefix": args.out_prefix.display().to_string(),
        "auto_pad": args.auto_pad,
    });
    let ckpt = m.read_input(&args.checkpoint)?;
    let params =
        ModelParams::from_bytes(&ckpt, &dcvnet::decoder::model_layout(), &args.checkpoint)?;
    let b1 = m.read_input(&args.image1)?;
    let b2 = m.read_input(&args.image2)?;
    let i1 = decode_image(&b1, &args.image1)?;
    let i2 = decode_image(&b2, &args.image2)?;
    if i1.shape() != i2.shape() {
        return Err(CliError::input(format!(
            "image sizes differ: {} is {}x{}, {} is {}x{}",
            args.image1.display(),
            i1.dim(2),
            i1.dim(1),
            args.image2.display(),
            i2.dim(2),
            i2.dim(1)
        )));
    }
    let (h, w) = (i1.dim(1), i1.dim(2));
    let (ph, pw) = (next_multiple(h, 8), next_multiple(w, 8));
    let padded = (ph, pw) != (h, w);
    if padded && !args.auto_pad {
        return Err(CliError::input(format!(
            "image size {w}x{h} is not a multiple of 8; pass --auto-pad to reflect-pad to {pw}x{ph}"
        )));
    }
    let (i1, i2) = if padded {
        m.padding = Some(Padding {
            original: [h, w],
            padded: [ph, pw],
            mode: "reflect, bottom/right",
        });
        (reflect_pad(&i1, ph, pw), reflect_pad(&i2, ph, pw))
    } else {
        (i1, i2)
    };
    let pair = ImagePair::new(i1, i2)?;
    let pred = forward_with_precision(&pair, &params, g.precision)?;
    m.timings_ms = Some(pred.timings);
    let flow = crop_top_left(&pred.fusion.flow_full, h, w);
    if !flow.is_finite() {
        return Err(CliError::Numerical(
            "predicted flow contains non-finite values".into(),
        ));
    }
    let field = FlowField::new(flow)?;

    let flo = with_suffix(&args.out_prefix, ".flo");
    let png = with_suffix(&args.out_prefix, ".png");
    if let Some(dir) = flo.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::io_error(dir, e))?;
    }
    write_flo(&field, &flo)?;
    write_color_png(&field, None, &png)?;
    m.outputs = vec![flo.display().to_string(), png.display().to_string()];
    println!(
        "wrote {} and {} ({}x{})",
        flo.display(),
        png.display(),
        w,
        h
    );
    Ok(())
}
