use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcvnet::flow::{parse_flo, FlowField};
use dcvnet::metrics::{epe, fl_all};
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{io_error, to_json, write_file, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFormat {
    Flo,
    Kitti,
}

impl FlowFormat {
    fn extension(self) -> &'static str {
        match self {
            FlowFormat::Flo => "flo",
            FlowFormat::Kitti => "png",
        }
    }
}

impl FromStr for FlowFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flo" => Ok(FlowFormat::Flo),
            "kitti" | "png" => Ok(FlowFormat::Kitti),
            _ => Err(format!("unknown format {s:?}; expected flo or kitti")),
        }
    }
}

pub struct EvalArgs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub format: Option<FlowFormat>,
    pub out: PathBuf,
}

pub fn manifest_path(args: &EvalArgs) -> PathBuf {
    let mut s = args.out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize)]
pub struct FileMetrics {
    pub name: String,
    pub epe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fl_all: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub format: FlowFormat,
    pub files: Vec<FileMetrics>,
    pub mean_epe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_fl_all: Option<f64>,
}

/// Flow files in `dir` keyed by file name.
fn list(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && (ext == "flo" || ext == "png") {
            let name = path
                .file_name()
                .expect("listed file")
                .to_string_lossy()
                .into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn resolve_format(files: &[&BTreeMap<String, PathBuf>]) -> CliResult<FlowFormat> {
    let exts: BTreeSet<&str> = files
        .iter()
        .flat_map(|m| m.keys())
        .filter_map(|n| Path::new(n).extension().and_then(|e| e.to_str()))
        .collect();
    match exts.len() {
        0 => Err(CliError::input("no .flo or .png flow files found")),
        1 if exts.contains("flo") => Ok(FlowFormat::Flo),
        1 => Ok(FlowFormat::Kitti),
        _ => Err(CliError::input(
            "directories mix .flo and .png files; pass --format flo or --format kitti explicitly",
        )),
    }
}

fn load(m: &mut RunManifest, path: &Path, format: FlowFormat) -> CliResult<FlowField> {
    let bytes = m.read_input(path)?;
    Ok(match format {
        FlowFormat::Flo => parse_flo(&bytes, path)?,
        FlowFormat::Kitti => dcvnet::flow::decode_kitti_png(&bytes, path)?,
    })
}

pub fn evaluate_dirs(args: &EvalArgs, m: &mut RunManifest) -> CliResult<EvalReport> {
    let pred = list(&args.pred_dir)?;
    let gt = list(&args.gt_dir)?;
    let format = match args.format {
        Some(f) => f,
        None => resolve_format(&[&pred, &gt])?,
    };
    let keep = |files: BTreeMap<String, PathBuf>| -> BTreeMap<String, PathBuf> {
        files
            .into_iter()
            .filter(|(n, _)| {
                Path::new(n).extension().and_then(|e| e.to_str()) == Some(format.extension())
            })
            .collect()
    };
    let (pred, gt) = (keep(pred), keep(gt));
    let mut unpaired: Vec<String> = pred
        .keys()
        .filter(|n| !gt.contains_key(*n))
        .map(|n| format!("{} (no ground truth)", args.pred_dir.join(n).display()))
        .collect();
    unpaired.extend(
        gt.keys()
            .filter(|n| !pred.contains_key(*n))
            .map(|n| format!("{} (no prediction)", args.gt_dir.join(n).display())),
    );
    if !unpaired.is_empty() {
        return Err(CliError::input(format!(
            "unpaired files:\n  {}",
            unpaired.join("\n  ")
        )));
    }
    if pred.is_empty() {
        return Err(CliError::input(format!(
            "no .{} files to evaluate",
            format.extension()
        )));
    }

    let mut files = Vec::new();
    for (name, p) in &pred {
        let pf = load(m, p, format)?;
        let gf = load(m, &gt[name], format)?;
        if pf.data.shape() != gf.data.shape() {
            return Err(CliError::input(format!(
                "{name}: prediction is {}x{}, ground truth is {}x{}",
                pf.width(),
                pf.height(),
                gf.width(),
                gf.height()
            )));
        }
        files.push(FileMetrics {
            name: name.clone(),
            epe: epe(&pf, &gf)?,
            fl_all: match format {
                FlowFormat::Kitti => Some(fl_all(&pf, &gf)?),
                FlowFormat::Flo => None,
            },
        });
    }
    let n = files.len() as f64;
    let mean_epe = files.iter().map(|f| f.epe).sum::<f64>() / n;
    let mean_fl_all = (format == FlowFormat::Kitti)
        .then(|| files.iter().filter_map(|f| f.fl_all).sum::<f64>() / n);
    Ok(EvalReport {
        format,
        files,
        mean_epe,
        mean_fl_all,
    })
}

pub fn run(args: &EvalArgs, m: &mut RunManifest) -> CliResult<()> {
    m.config = json!({
        "pred_dir": args.pred_dir.display().to_string(),
        "gt_dir": args.gt_dir.display().to_string(),
        "format": args.format,
        "out": args.out.display().to_string(),
    });
    let report = evaluate_dirs(args, m)?;
    let kitti = report.format == FlowFormat::Kitti;
    let width = report
        .files
        .iter()
        .map(|f| f.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    if kitti {
        println!("{:<width$}  {:>10}  {:>8}", "file", "EPE", "Fl-all%");
    } else {
        println!("{:<width$}  {:>10}", "file", "EPE");
    }
    for f in &report.files {
        match f.fl_all {
            Some(fl) => println!("{:<width$}  {:>10.4}  {:>8.3}", f.name, f.epe, fl),
            None => println!("{:<width$}  {:>10.4}", f.name, f.epe),
        }
    }
    match report.mean_fl_all {
        Some(fl) => println!("{:<width$}  {:>10.4}  {:>8.3}", "mean", report.mean_epe, fl),
        None => println!("{:<width$}  {:>10.4}", "mean", report.mean_epe),
    }
    write_file(&args.out, to_json(&report).as_bytes())?;
    m.outputs = vec![args.out.display().to_string()];
    Ok(())
}
