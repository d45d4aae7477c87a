use std::io::{BufWriter, Write};
use std::path::PathBuf;

use dcvnet::decoder::forward;
use dcvnet::tape::Precision;
use dcvnet::training::{toy_dataset, train_toy, TrainConfig};
use serde::Serialize;

use super::Globals;
use crate::manifest::{sha256_hex, RunManifest};
use crate::{io_error, to_json, write_file, CliError, CliResult};

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub const CHECKPOINT: &str = "checkpoint.dcvw";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";

pub fn manifest_path(args: &TrainArgs) -> PathBuf {
    args.out_dir.join("manifest.json")
}

#[derive(Serialize)]
struct Summary {
    steps: usize,
    final_epe: f64,
    final_loss: f64,
    initial_loss_mean10: f64,
    final_to_initial: f64,
    wall_s: f64,
    checkpoint_sha256: String,
}

pub fn load_config(args: &TrainArgs, g: &Globals, m: &mut RunManifest) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let bytes = m.read_input(path)?;
            let text = String::from_utf8(bytes).map_err(|_| {
                CliError::input(format!("{}: config is not UTF-8 text", path.display()))
            })?;
            TrainConfig::parse(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: &TrainArgs, g: &Globals, m: &mut RunManifest) -> CliResult<()> {
    if g.precision != Precision::F64 {
        return Err(CliError::input(
            "train-toy runs in f64 only; drop --precision f32",
        ));
    }
    let cfg = load_config(args, g, m)?;
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;

    let data = toy_dataset(&cfg)?;
    let metrics_path = args.out_dir.join(METRICS);
    let file = std::fs::File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_err = None;
    let start = std::time::Instant::now();
    let every = (cfg.steps / 20).max(1);
    let outcome = train_toy(&data, &cfg, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        if r.step % every == 0 || r.step + 1 == cfg.steps {
            eprintln!(
                "step {:>5}  lr {:.3e}  loss {:.4}  |g| {:.3}",
                r.step, r.lr, r.loss, r.grad_norm
            );
        }
    });
    log.flush().map_err(|e| io_error(&metrics_path, e))?;
    if let Some(e) = log_err {
        return Err(io_error(&metrics_path, e));
    }
    let outcome = outcome?;
    let wall_s = start.elapsed().as_secs_f64();

    let ckpt_path = args.out_dir.join(CHECKPOINT);
    let bytes = outcome.params.to_bytes();
    write_file(&ckpt_path, &bytes)?;
    let losses = outcome.losses();
    let n0 = losses.len().min(10);
    let initial = losses[..n0].iter().sum::<f64>() / n0 as f64;
    let last = *losses.last().expect("at least one step");
    let summary = Summary {
        steps: cfg.steps,
        final_epe: outcome.final_epe,
        final_loss: last,
        initial_loss_mean10: initial,
        final_to_initial: last / initial,
        wall_s,
        checkpoint_sha256: sha256_hex(&bytes),
    };
    let summary_path = args.out_dir.join(SUMMARY);
    write_file(&summary_path, to_json(&summary).as_bytes())?;

    m.timings_ms = Some(forward(&data[0].0, &outcome.params)?.timings);
    m.outputs = [&ckpt_path, &metrics_path, &summary_path]
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    println!(
        "final EPE {:.4} px, final loss {:.4} ({:.1}% of initial {:.4}), checkpoint {} sha256 {}",
        summary.final_epe,
        last,
        100.0 * summary.final_to_initial,
        initial,
        ckpt_path.display(),
        summary.checkpoint_sha256
    );
    Ok(())
}
