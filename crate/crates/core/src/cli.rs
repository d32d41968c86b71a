//! Command-line surface: gen-patterns, simulate, train, eval, export-depth-vis.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::io::{
    read_checkpoint, read_gray, read_json, read_mask, read_pfm, write_checkpoint, write_gray, write_json, write_mask,
    write_pfm, Artifact, Manifest, RunConfig,
};
use crate::metrics::{depth_to_disparity, evaluate, DepthMap, DisparityMap, EvalReport};
use crate::patterns::{default_pattern_set, extended_pattern_set, pattern_subset, Pattern};
use crate::raster::Image;
use crate::simulator::{analytic_scene, simulate_captures, RadiometricParams, SceneKind};
use crate::trainer::{extract_depth_map, sampling_for, train, ExtractOptions, LogRow, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const WORKERS_ENV: &str = "VOXELSL_WORKERS";
const SEED_ENV: &str = "VOXELSL_SEED";

#[derive(Debug, Parser)]
#[command(name = "voxelsl", version, about = "Structured-light depth from a density voxel grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the random binary projector patterns.
    GenPatterns(GenPatternsArgs),
    /// Render synthetic captures of an analytic scene.
    Simulate(SimulateArgs),
    /// Optimize a density grid against captures and extract depth.
    Train(TrainArgs),
    /// Compare an estimated depth map with ground truth.
    Eval(EvalArgs),
    /// Write an 8-bit visualization of a disparity (or depth) PFM.
    ExportDepthVis(ExportArgs),
}

#[derive(Debug, clap::Args)]
struct GenPatternsArgs {
    #[arg(long, default_value_t = 1400)]
    width: usize,
    #[arg(long, default_value_t = 1512)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Number of patterns: 6 is the default set; 2..=9 draws from the
    /// nine-pattern family.
    #[arg(long, default_value_t = 6)]
    count: usize,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    /// Preset name (plane, ramp, sphere, step) or a JSON scene file.
    #[arg(long)]
    scene: String,
    /// Radiometric parameters JSON; defaults when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying the rig; the half-resolution reference rig
    /// otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Capture file format.
    #[arg(long, default_value = "png", value_parser = ["png", "pgm"])]
    format: String,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    captures: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth_out: Option<PathBuf>,
    #[arg(long)]
    disparity_out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Zero the wall-clock column of the log so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    fx: f64,
    #[arg(long)]
    baseline: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1")]
    thresholds: Vec<f64>,
    /// `.json` or `.csv`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only pixels set in this mask are evaluated.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    /// `.png` or `.pgm`.
    #[arg(long)]
    out: PathBuf,
    /// The input holds depth; convert with `--fx` and `--baseline`.
    #[arg(long, requires_all = ["fx", "baseline"])]
    from_depth: bool,
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    baseline: Option<f64>,
    /// Value mapped to black; the smallest valid value by default.
    #[arg(long)]
    min: Option<f64>,
    /// Value mapped to white; the largest valid value by default.
    #[arg(long)]
    max: Option<f64>,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Entry point of the binary.
pub fn main_exit_code() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run_pipeline(std::env::args_os())
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_pipeline<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::GenPatterns(a) => gen_patterns(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportDepthVis(a) => export_vis(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn env_override<T: std::str::FromStr>(name: &str) -> CliResult<Option<T>> {
    match std::env::var(name) {
        Ok(s) => match s.trim().parse() {
            Ok(v) => Ok(Some(v)),
            Err(_) => usage(format!("{name}={s} is not a valid value")),
        },
        Err(_) => Ok(None),
    }
}

fn pattern_file(i: usize) -> String {
    format!("pat_{i:03}.pgm")
}

fn gen_patterns(a: GenPatternsArgs) -> CliResult<()> {
    if !(2..=9).contains(&a.count) {
        return usage(format!("--count must be in 2..=9, got {}", a.count));
    }
    let pats = if a.count == 6 {
        default_pattern_set(a.width, a.height, a.seed)?
    } else {
        pattern_subset(&extended_pattern_set(a.width, a.height, a.seed)?, a.count)?
    };
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = Manifest::new("gen-patterns");
    for (i, p) in pats.iter().enumerate() {
        let path = a.out.join(pattern_file(i));
        write_gray(&path, &crate::io::pattern_to_image(p), 8)?;
        let mut art = Artifact::of(&path, &a.out)?;
        art.cell = Some(p.cell);
        art.seed = Some(p.seed);
        manifest.files.push(art);
    }
    manifest.details = serde_json::json!({
        "width": a.width,
        "height": a.height,
        "master_seed": a.seed,
        "count": a.count,
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    info!("wrote {} patterns to {}", pats.len(), a.out.display());
    Ok(())
}

/// Image files in `dir` with one of `exts`, sorted by name.
fn list_images(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

/// Patterns listed in the directory's manifest, or every `pat_*` image.
fn load_patterns(dir: &Path) -> Result<(Vec<Pattern>, Vec<PathBuf>)> {
    let manifest_path = dir.join("manifest.json");
    let listed: Vec<(PathBuf, usize, u64)> = if manifest_path.exists() {
        let m: Manifest = read_json(&manifest_path)?;
        m.verify(dir)?;
        m.files
            .iter()
            .map(|a| (dir.join(&a.path), a.cell.unwrap_or(0), a.seed.unwrap_or(0)))
            .collect()
    } else {
        list_images(dir, &["pgm", "png"])?
            .into_iter()
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("pat_")))
            .map(|p| (p, 0, 0))
            .collect()
    };
    let mut pats = Vec::with_capacity(listed.len());
    for (path, cell, seed) in &listed {
        let mut p = crate::io::pattern_from_image(&read_gray(path)?)?;
        p.cell = *cell;
        p.seed = *seed;
        pats.push(p);
    }
    Ok((pats, listed.into_iter().map(|(p, _, _)| p).collect()))
}

fn load_captures(dir: &Path) -> Result<Vec<Image>> {
    list_images(dir, &["png", "pgm"])?
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("cap_")))
        .map(|p| read_gray(&p))
        .collect()
}

fn manifest_input(dir: &Path) -> Result<Vec<Artifact>> {
    let p = dir.join("manifest.json");
    if p.exists() {
        Ok(vec![Artifact::of(&p, Path::new(""))?])
    } else {
        Ok(Vec::new())
    }
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::reference(0.5, 1000.0)?,
    };
    let (cam, proj) = cfg.rig()?;
    let kind = scene_from_arg(&a.scene, &cam)?;
    let rad: RadiometricParams = match &a.params {
        Some(p) => read_json(p)?,
        None => cfg.radiometric,
    };
    let (patterns, _) = load_patterns(&a.patterns)?;
    let scene = analytic_scene(kind, &cam)?;
    let sim = simulate_captures(&scene, &patterns, &cam, &proj, &rad, a.seed)?;

    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = Manifest::new("simulate");
    manifest.inputs = manifest_input(&a.patterns)?;
    let record = |path: PathBuf, m: &mut Manifest| -> Result<()> {
        m.files.push(Artifact::of(&path, &a.out)?);
        Ok(())
    };
    for (i, c) in sim.captures.iter().enumerate() {
        let path = a.out.join(format!("cap_{i:03}.{}", a.format));
        let bits = if a.format == "png" { 16 } else { 8 };
        write_gray(&path, c, bits)?;
        record(path, &mut manifest)?;
    }
    let gt = a.out.join("gt_depth.pfm");
    write_pfm(&gt, &scene.map.to_image())?;
    record(gt, &mut manifest)?;
    let gt_disp = a.out.join("gt_disparity.pfm");
    write_pfm(&gt_disp, &depth_to_disparity(&scene.map, cam.fx, proj.baseline)?.to_image())?;
    record(gt_disp, &mut manifest)?;
    for (name, mask) in [("shadow_mask.pgm", &sim.shadow), ("lit_mask.pgm", &sim.lit)] {
        let p = a.out.join(name);
        write_mask(&p, mask)?;
        record(p, &mut manifest)?;
    }

    cfg.scene = Some(kind);
    cfg.radiometric = rad;
    let (near, z_max) = scene.sampling_bounds();
    cfg.train.near = Some(near);
    cfg.train.z_max = z_max;
    cfg.paths.patterns = Some(a.patterns.clone());
    cfg.paths.captures = Some(a.out.clone());
    let run = a.out.join("run_config.json");
    write_json(&run, &cfg)?;
    record(run, &mut manifest)?;
    manifest.details = serde_json::json!({
        "scene": kind,
        "radiometric": rad,
        "seed": a.seed,
        "fx": cam.fx,
        "baseline": proj.baseline,
        "min_depth": scene.min_depth(),
        "mean_depth": scene.mean_depth(),
        "lit_pixels": sim.lit.count(),
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    info!("simulated {} captures of the {} scene", sim.captures.len(), kind.name());
    Ok(())
}

fn scene_from_arg(arg: &str, cam: &CameraModel) -> CliResult<SceneKind> {
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        Ok(read_json(path)?)
    } else {
        SceneKind::preset(arg, cam).or_else(|e| usage(e.to_string()))
    }
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed.or(env_override(SEED_ENV)?) {
        cfg.train.seed = seed;
    }
    let workers = match a.workers {
        Some(w) => w,
        None => env_override(WORKERS_ENV)?.unwrap_or(0),
    };
    let (cam, proj) = cfg.rig()?;
    let (patterns, _) = load_patterns(&a.patterns)?;
    let captures = load_captures(&a.captures)?;
    let opts = TrainOptions {
        workers,
        snapshot_path: Some(a.out.with_extension("nan.vslg")),
    };
    let result = train(&captures, &patterns, &cam, &proj, &cfg.train, &opts)?;
    write_checkpoint(&a.out, &result.grid)?;

    let out_dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = Manifest::new("train");
    manifest.inputs = manifest_input(&a.patterns)?;
    manifest.inputs.extend(manifest_input(&a.captures)?);
    manifest.inputs.push(Artifact::of(&a.config, Path::new(""))?);
    manifest.files.push(Artifact::of(&a.out, &out_dir)?);

    if let Some(log_path) = &a.log {
        let mut text = String::from(LogRow::CSV_HEADER);
        text.push('\n');
        for row in &result.log {
            let row = if a.deterministic {
                LogRow {
                    wall_clock_s: 0.0,
                    ..*row
                }
            } else {
                *row
            };
            text.push_str(&row.csv_line());
            text.push('\n');
        }
        crate::io::atomic_write(log_path, text.as_bytes())?;
        manifest.files.push(Artifact::of(log_path, &out_dir)?);
    }
    if a.depth_out.is_some() || a.disparity_out.is_some() {
        let sampling = sampling_for(&result.grid, &cfg.train, false)?;
        let (depth, disp) = extract_depth_map(
            &result.grid,
            &cam,
            &result.frame,
            &sampling,
            ExtractOptions::from(&cfg.train),
            proj.baseline,
        )?;
        if let Some(p) = &a.depth_out {
            write_pfm(p, &depth.to_image())?;
            manifest.files.push(Artifact::of(p, &out_dir)?);
        }
        if let Some(p) = &a.disparity_out {
            write_pfm(p, &disp.to_image())?;
            manifest.files.push(Artifact::of(p, &out_dir)?);
        }
    }
    manifest.details = serde_json::json!({
        "train": cfg.train,
        "workers": workers,
        "deterministic": a.deterministic,
    });
    let mut manifest_path = a.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    write_json(Path::new(&manifest_path), &manifest)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(*t > 0.0)) {
        return usage("--thresholds must be positive");
    }
    let est = DepthMap::from_image(&read_pfm(&a.est)?);
    let mut gt = DepthMap::from_image(&read_pfm(&a.gt)?);
    if est.dims() != gt.dims() {
        return Err(Error::InvalidArgument(format!(
            "estimate is {}x{} but ground truth is {}x{}",
            est.width, est.height, gt.width, gt.height
        ))
        .into());
    }
    if let Some(m) = &a.mask {
        let mask = read_mask(m)?;
        if (mask.width, mask.height) != gt.dims() {
            return Err(Error::InvalidArgument("mask size does not match the maps".into()).into());
        }
        gt = gt.restricted(&mask);
    }
    let report = evaluate(&est, &gt, a.fx, a.baseline, &a.thresholds)?;
    match &a.out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => crate::io::atomic_write(p, report_csv(&report).as_bytes())?,
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    info!("MAE {:.3} mm over {} pixels", report.mae_mm, report.evaluated_pixels);
    Ok(())
}

fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,threshold,value\n");
    s.push_str(&format!("mae_mm,,{}\n", r.mae_mm));
    for o in &r.outliers {
        s.push_str(&format!("outlier_percent,{},{}\n", o.t, o.percent));
        s.push_str(&format!("mae_mm_outliers_replaced,{},{}\n", o.t, o.mae_mm));
    }
    s.push_str(&format!("evaluated_pixels,,{}\n", r.evaluated_pixels));
    s.push_str(&format!("invalid_estimates,,{}\n", r.invalid_estimates));
    s
}

/// Linear 8-bit map of the valid values between `lo` and `hi`; invalid
/// pixels are black.
pub fn visualize(map: &DisparityMap, lo: Option<f64>, hi: Option<f64>) -> Result<Image> {
    let vals = || map.disp.iter().zip(&map.valid.data).filter(|(_, &v)| v).map(|(&d, _)| d);
    let lo = lo.unwrap_or_else(|| vals().fold(f64::INFINITY, f64::min));
    let hi = hi.unwrap_or_else(|| vals().fold(f64::NEG_INFINITY, f64::max));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("map has no valid pixels".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = map
        .disp
        .iter()
        .zip(&map.valid.data)
        .map(|(&d, &v)| if v { ((d - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Image::new(map.width, map.height, data)
}

fn export_vis(a: ExportArgs) -> CliResult<()> {
    let img = read_pfm(&a.input)?;
    let disp = if a.from_depth {
        let (fx, b) = (a.fx.unwrap_or_default(), a.baseline.unwrap_or_default());
        depth_to_disparity(&DepthMap::from_image(&img), fx, b)?
    } else {
        DisparityMap::from_image(&img)
    };
    write_gray(&a.out, &visualize(&disp, a.min, a.max)?, 8)?;
    Ok(())
}

/// Loads a checkpoint and extracts depth with a run config's settings.
pub fn depth_from_checkpoint(checkpoint: &Path, cfg: &RunConfig) -> Result<(DepthMap, DisparityMap)> {
    let grid = read_checkpoint(checkpoint)?;
    let (cam, proj) = cfg.rig()?;
    let frame = crate::geometry::ndc_frame_from_camera(&cam, cfg.train.near_plane()?)?;
    let sampling = sampling_for(&grid, &cfg.train, false)?;
    extract_depth_map(&grid, &cam, &frame, &sampling, ExtractOptions::from(&cfg.train), proj.baseline)
}
