use std::path::PathBuf;
use std::time::Instant;

use dcvnet::cost_volume::{build_cost_volume, CostVolumeSpec, CANONICAL_SPECS};
use dcvnet::decoder::{forward_with_precision, PhaseTimings};
use dcvnet::encoder::{ImagePair, S2_CHANNELS, S8_CHANNELS};
use dcvnet::kernels::{conv3d, Conv3dSpec};
use dcvnet::params::ModelParams;
use dcvnet::{reference, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::Globals;
use crate::manifest::RunManifest;
use crate::pad::next_multiple;
use crate::{to_json, write_file, CliError, CliResult};

#[derive(Clone, Debug)]
pub struct BenchArgs {
    /// `(height, width)` pairs as requested.
    pub sizes: Vec<(usize, usize)>,
    pub repeats: usize,
    pub out: PathBuf,
}

pub fn manifest_path(args: &BenchArgs) -> PathBuf {
    let mut s = args.out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Parses `WxH[,WxH...]`.
pub fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>, String> {
    text.split(',')
        .map(|item| {
            let (w, h) = item
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("size {item:?} is not WIDTHxHEIGHT"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad size {item:?}"))
            };
            let (w, h) = (parse(w)?, parse(h)?);
            if w == 0 || h == 0 {
                return Err(format!("size {item:?} must be positive"));
            }
            Ok((h, w))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub name: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub runs: usize,
}

impl Timing {
    fn from_samples(name: &str, samples: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            median_ms: median(samples),
            min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
            runs: samples.len(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SizeReport {
    /// `[height, width]` as requested and as run after padding to 8.
    pub requested: [usize; 2],
    pub padded: [usize; 2],
    pub timings: Vec<Timing>,
    /// Naive over optimized median time for building all seven volumes.
    pub cost_volume_speedup: f64,
    /// Whether the optimized volumes equalled the naive ones bit for bit.
    pub naive_matches: bool,
    /// Median per-phase forward times.
    pub phases: PhaseTimings,
}

#[derive(Clone, Debug, Serialize)]
pub struct Machine {
    pub threads: usize,
    pub os: &'static str,
    pub arch: &'static str,
    pub cpu: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub machine: Machine,
    pub repeats: usize,
    pub precision: String,
    pub sizes: Vec<SizeReport>,
}

fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn machine() -> Machine {
    let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_string())
    });
    Machine {
        threads: rayon::current_num_threads(),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        cpu,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

fn features(
    spec: &CostVolumeSpec,
    s2: &(Tensor, Tensor),
    s8: &(Tensor, Tensor),
) -> (Tensor, Tensor) {
    if spec.stride == 2 {
        s2.clone()
    } else {
        s8.clone()
    }
}

fn bench_size(h: usize, w: usize, repeats: usize, seed: u64, g: &Globals) -> CliResult<SizeReport> {
    let (ph, pw) = (next_multiple(h, 8), next_multiple(w, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s2 = (
        Tensor::uniform(&[S2_CHANNELS, ph / 2, pw / 2], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[S2_CHANNELS, ph / 2, pw / 2], -1.0, 1.0, &mut rng),
    );
    let s8 = (
        Tensor::uniform(&[S8_CHANNELS, ph / 8, pw / 8], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[S8_CHANNELS, ph / 8, pw / 8], -1.0, 1.0, &mut rng),
    );

    let mut fast_ms = Vec::new();
    let mut naive_ms = Vec::new();
    let mut naive_matches = true;
    for r in 0..repeats {
        let (fast, t) = timed(|| {
            CANONICAL_SPECS
                .iter()
                .map(|s| {
                    let (a, b) = features(s, &s2, &s8);
                    build_cost_volume(&a, &b, s).map(|v| v.data)
                })
                .collect::<dcvnet::Result<Vec<_>>>()
        });
        let fast = fast?;
        fast_ms.push(t);
        let (naive, t) = timed(|| {
            CANONICAL_SPECS
                .iter()
                .map(|s| {
                    let (a, b) = features(s, &s2, &s8);
                    reference::cost_volume(&a, &b, s)
                })
                .collect::<Vec<_>>()
        });
        naive_ms.push(t);
        if r == 0 {
            naive_matches = fast == naive;
        }
    }

    let spec = Conv3dSpec::same(28, 32, 3);
    let stack = Tensor::uniform(&[28, 81, ph / 8, pw / 8], -1.0, 1.0, &mut rng);
    let weights = Tensor::uniform(&spec.weight_shape(), -0.1, 0.1, &mut rng);
    let bias = Tensor::zeros(&[32]);
    let mut conv_ms = Vec::new();
    for _ in 0..repeats {
        let (y, t) = timed(|| conv3d(&stack, &weights, &bias, &spec));
        y?;
        conv_ms.push(t);
    }

    let params = ModelParams::init(seed);
    let pair = ImagePair::new(
        Tensor::uniform(&[3, ph, pw], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[3, ph, pw], -1.0, 1.0, &mut rng),
    )?;
    let mut phases: Vec<PhaseTimings> = Vec::new();
    for _ in 0..repeats {
        let pred = forward_with_precision(&pair, &params, g.precision)?;
        if !pred.fusion.flow_full.is_finite() {
            return Err(CliError::Numerical(
                "forward produced non-finite flow".into(),
            ));
        }
        phases.push(pred.timings);
    }
    let pick = |f: fn(&PhaseTimings) -> f64| phases.iter().map(f).collect::<Vec<f64>>();
    let encode = pick(|p| p.encode_ms);
    let cost = pick(|p| p.cost_volume_ms);
    let decoder = pick(|p| p.decoder_ms);
    let upsample = pick(|p| p.upsample_ms);
    let total = pick(|p| p.total_ms);

    let fast = Timing::from_samples("cost volume (optimized, 7 specs)", &fast_ms);
    let naive = Timing::from_samples("cost volume (naive oracle, 7 specs)", &naive_ms);
    let speedup = naive.median_ms / fast.median_ms;
    Ok(SizeReport {
        requested: [h, w],
        padded: [ph, pw],
        timings: vec![
            fast,
            naive,
            Timing::from_samples("conv3d 28->32 3x3x3 on the stack", &conv_ms),
            Timing::from_samples("forward: encode", &encode),
            Timing::from_samples("forward: cost volume", &cost),
            Timing::from_samples("forward: decoder", &decoder),
            Timing::from_samples("forward: upsample", &upsample),
            Timing::from_samples("forward: total", &total),
        ],
        cost_volume_speedup: speedup,
        naive_matches,
        phases: PhaseTimings {
            encode_ms: median(&encode),
            cost_volume_ms: median(&cost),
            decoder_ms: median(&decoder),
            upsample_ms: median(&upsample),
            total_ms: median(&total),
        },
    })
}

pub fn bench(args: &BenchArgs, g: &Globals) -> CliResult<BenchReport> {
    if args.repeats == 0 {
        return Err(CliError::input("--repeats must be >= 1"));
    }
    let seed = g.seed.unwrap_or(0);
    let sizes = args
        .sizes
        .iter()
        .map(|&(h, w)| bench_size(h, w, args.repeats, seed, g))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(BenchReport {
        machine: machine(),
        repeats: args.repeats,
        precision: g.precision_name().to_string(),
        sizes,
    })
}

pub fn print_table(report: &BenchReport) {
    let m = &report.machine;
    println!(
        "machine: {} threads, {}/{}, {}",
        m.threads,
        m.os,
        m.arch,
        m.cpu.as_deref().unwrap_or("unknown cpu")
    );
    for s in &report.sizes {
        println!(
            "\nsize {}x{} (run at {}x{}), {} repeat(s)",
            s.requested[1], s.requested[0], s.padded[1], s.padded[0], report.repeats
        );
        println!("{:<40} {:>12} {:>12}", "measurement", "median ms", "min ms");
        for t in &s.timings {
            println!("{:<40} {:>12.2} {:>12.2}", t.name, t.median_ms, t.min_ms);
        }
        println!(
            "cost-volume speedup over naive: {:.1}x (outputs {})",
            s.cost_volume_speedup,
            if s.naive_matches {
                "identical"
            } else {
                "DIFFER"
            }
        );
    }
}

pub fn run(args: &BenchArgs, g: &Globals, m: &mut RunManifest) -> CliResult<()> {
    m.config = json!({
        "sizes": args.sizes.iter().map(|(h, w)| format!("{w}x{h}")).collect::<Vec<_>>(),
        "repeats": args.repeats,
        "out": args.out.display().to_string(),
    });
    let report = bench(args, g)?;
    print_table(&report);
    if let Some(first) = report.sizes.first() {
        m.timings_ms = Some(first.phases);
    }
    write_file(&args.out, to_json(&report).as_bytes())?;
    m.outputs = vec![args.out.display().to_string()];
    Ok(())
}
