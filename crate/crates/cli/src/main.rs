use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcvnet::cost_volume::CostVolumeSpec;
use dcvnet::tape::Precision;
use dcvnet_cli::commands::{bench, costvol, eval, flow, train, Globals};
use dcvnet_cli::manifest::RunManifest;
use dcvnet_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "dcvnet", version, about = "Dilated cost volume optical flow")]
struct Cli {
    /// Worker threads (default: all hardware threads).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed; for train-toy it overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Storage precision of inference activations.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate flow between two images.
    Flow {
        image1: PathBuf,
        image2: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Writes PREFIX.flo, PREFIX.png and PREFIX.manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Reflect-pad to a multiple of 8 and crop the flow back.
        #[arg(long)]
        auto_pad: bool,
    },
    /// Train on the synthetic translation set.
    TrainToy {
        /// `key = value` lines overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// EPE (and Fl-all for KITTI PNGs) of predictions against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long)]
        format: Option<eval::FlowFormat>,
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Time the cost volume, a 3D convolution and the full forward pass.
    Bench {
        /// Comma-separated WIDTHxHEIGHT list.
        #[arg(long, default_value = "1024x436")]
        sizes: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value = "bench.json")]
        out: PathBuf,
    },
    /// Dump one position's similarity window of a canonical cost volume.
    CostvolDump {
        image1: PathBuf,
        image2: PathBuf,
        /// `S,D`, e.g. `8,21`.
        #[arg(long, value_parser = costvol::parse_spec)]
        spec: CostVolumeSpec,
        /// `ROW,COL` in input pixels.
        #[arg(long, value_parser = costvol::parse_position)]
        position: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        /// Use learned encoder features instead of pixel patches.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(2);
        }
    }
    let g = Globals {
        seed: cli.seed,
        precision: match cli.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
    };
    let name = match &cli.command {
        Command::Flow { .. } => "flow",
        Command::TrainToy { .. } => "train-toy",
        Command::Eval { .. } => "eval",
        Command::Bench { .. } => "bench",
        Command::CostvolDump { .. } => "costvol-dump",
    };
    let mut m = RunManifest::new(name, g.seed, g.precision_name());
    let (result, path): (CliResult<()>, PathBuf) = match cli.command {
        Command::Flow {
            image1,
            image2,
            checkpoint,
            out,
            auto_pad,
        } => {
            let a = flow::FlowArgs {
                image1,
                image2,
                checkpoint,
                out_prefix: out,
                auto_pad,
            };
            (flow::run(&a, &g, &mut m), flow::manifest_path(&a))
        }
        Command::TrainToy { config, out } => {
            let a = train::TrainArgs {
                config,
                out_dir: out,
            };
            (train::run(&a, &g, &mut m), train::manifest_path(&a))
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            format,
            out,
        } => {
            let a = eval::EvalArgs {
                pred_dir,
                gt_dir,
                format,
                out,
            };
            (eval::run(&a, &mut m), eval::manifest_path(&a))
        }
        Command::Bench {
            sizes,
            repeats,
            out,
        } => {
            let a = bench::BenchArgs {
                sizes: Vec::new(),
                repeats,
                out,
            };
            let result = bench::parse_sizes(&sizes)
                .map_err(CliError::Input)
                .and_then(|sizes| {
                    let a = bench::BenchArgs { sizes, ..a.clone() };
                    bench::run(&a, &g, &mut m)
                });
            (result, bench::manifest_path(&a))
        }
        Command::CostvolDump {
            image1,
            image2,
            spec,
            position,
            out,
            checkpoint,
        } => {
            let a = costvol::CostvolArgs {
                image1,
                image2,
                spec,
                position,
                out,
                checkpoint,
            };
            (costvol::run(&a, &mut m), costvol::manifest_path(&a))
        }
    };
    m.finish(&result);
    let written = m.write(&path);
    match (result, written) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Ok(()), Err(e)) => {
            eprintln!("error: writing manifest: {e}");
            ExitCode::from(2)
        }
        (Err(e), w) => {
            eprintln!("error: {e}");
            if let Err(we) = w {
                eprintln!("error: writing manifest: {we}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
