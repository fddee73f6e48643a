//! Command-line driver: `synth`, `train`, `render`, `eval`, `stems` and
//! `inspect-lighting` subcommands over the library pipeline.
//!
//! Every command reads an optional JSON config plus flat `--set key=value`
//! overrides, routes all randomness through a single `--seed`, and writes a
//! `manifest.json` snapshot (configs, seed, artifacts, per-phase wall time)
//! next to its outputs. Exit codes: 0 ok, 1 usage, 2 I/O, 3 numerical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    crop_points, exposure_histogram, hdbscan_cluster, msssim, psnr, remove_foliage_points,
    stem_filter_and_merge, HdbscanParams, HsvBox, StemFilterConfig,
};
use crate::dataset::{read_json, write_json_atomic, CameraRecord, Dataset};
use crate::error::{Error, Result};
use crate::field::{Aabb, FieldInit, VoxelField};
use crate::geometry::Dtm;
use crate::img::ImageBuf;
use crate::render::{render_image, BoundsPolicy, RenderConfig};
use crate::scene::{generate_capture, generate_forest, CaptureConfig, ForestParams};
use crate::train::{fit, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "understory", version, about = "Ground-only forest reconstruction")]
pub struct Cli {
    /// Seed for all randomness in this run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to all logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic forest dataset.
    Synth(SynthArgs),
    /// Fit a voxel field to a dataset.
    Train(TrainArgs),
    /// Render views from a trained checkpoint.
    Render(RenderArgs),
    /// Compare rendered images against reference images.
    Eval(EvalArgs),
    /// Count stems from a trained checkpoint.
    Stems(StemsArgs),
    /// Luminance-histogram lighting diagnostics.
    InspectLighting(InspectLightingArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Forest parameters JSON; defaults apply when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Capture parameters JSON; defaults apply when omitted.
    #[arg(long)]
    pub capture: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write exact linear-RGB sidecars next to the PNGs.
    #[arg(long)]
    pub float: bool,
    /// Flat config overrides, key=value (scene config).
    #[arg(long = "set")]
    pub set: Vec<String>,
    /// Flat config overrides, key=value (capture config).
    #[arg(long = "set-capture")]
    pub set_capture: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Initialize from an existing checkpoint instead of a fresh field.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// cameras.json describing the views to render.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start integration at the terrain entry (requires --dtm).
    #[arg(long)]
    pub crop: bool,
    /// Mask samples by the trained visibility channel.
    #[arg(long)]
    pub mask: bool,
    #[arg(long)]
    pub dtm: Option<PathBuf>,
    /// Height margin above the terrain for --crop, meters.
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    /// Quadrature samples per ray.
    #[arg(long, default_value_t = 192)]
    pub samples: usize,
    /// Background color as R,G,B in [0,1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
    #[arg(long)]
    pub float: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub rendered: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StemsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dtm: PathBuf,
    /// Stem pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the intermediate point clouds of each stage as PLY.
    #[arg(long)]
    pub keep_stages: bool,
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct InspectLightingArgs {
    /// An image file or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if parts.len() != 3 {
        return Err("expected R,G,B".into());
    }
    Ok([parts[0], parts[1], parts[2]])
}

// ---------------------------------------------------------------------------
// Config plumbing and the run manifest
// ---------------------------------------------------------------------------

/// Load a JSON config (or its default) and apply flat `key=value` overrides.
/// Returns the parsed config together with the effective JSON snapshot.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<(T, Value)>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut value: Value = match path {
        Some(p) => read_json(p)?,
        None => serde_json::to_value(T::default())?,
    };
    let map = value
        .as_object_mut()
        .ok_or_else(|| Error::input("config root must be a JSON object"))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::input(format!("override '{item}' is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_owned()));
        map.insert(key.to_owned(), parsed);
    }
    let cfg: T = serde_json::from_value(value)
        .map_err(|e| Error::input(format!("invalid config: {e}")))?;
    // Re-serialize so the manifest records the full effective config.
    let snapshot = serde_json::to_value(&cfg)?;
    Ok((cfg, snapshot))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub configs: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
    pub wall_time_s: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed,
            configs: BTreeMap::new(),
            artifacts: Vec::new(),
            wall_time_s: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join("manifest.json"), self)
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("synth", seed);
    let (forest, forest_snap) =
        load_config::<ForestParams>(args.scene.as_deref(), &args.set)?;
    let (capture_cfg, capture_snap) =
        load_config::<CaptureConfig>(args.capture.as_deref(), &args.set_capture)?;
    manifest.configs.insert("scene".into(), forest_snap);
    manifest.configs.insert("capture".into(), capture_snap);

    let t0 = Instant::now();
    let scene = generate_forest(&forest)?;
    manifest
        .wall_time_s
        .insert("generate".into(), t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let capture = generate_capture(&scene, &capture_cfg, seed)?;
    let gsd = capture_cfg.gsd_target;
    let dataset = Dataset::from_capture(capture, Some(scene));
    dataset.save(&args.out, args.float)?;
    manifest
        .wall_time_s
        .insert("capture".into(), t1.elapsed().as_secs_f64());

    for v in &dataset.views {
        manifest.artifacts.push(format!("images/{}.png", v.name));
    }
    manifest.artifacts.extend(
        ["cameras.json", "dtm.json", "scene.json"]
            .iter()
            .map(|s| s.to_string()),
    );
    manifest
        .notes
        .insert("gsd_m_per_px".into(), serde_json::json!(gsd));
    manifest.write(&args.out)
}

/// CLI-level training config: the optimizer settings plus the field shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCliConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub resolution: [usize; 3],
    /// Extra space above the terrain when the dataset carries no scene
    /// description, meters.
    pub z_headroom: f64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            train: TrainConfig::default(),
            resolution: [64, 64, 64],
            z_headroom: 10.0,
        }
    }
}

fn field_bounds(dataset: &Dataset, z_headroom: f64) -> Result<Aabb> {
    if let Some(scene) = &dataset.scene {
        return Ok(scene.bounds());
    }
    let (min_x, min_y, max_x, max_y) = dataset.dtm.footprint();
    Aabb::new(
        [min_x, min_y, dataset.dtm.min_height() - 1.0],
        [max_x, max_y, dataset.dtm.max_height() + z_headroom],
    )
}

pub fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("train", seed);
    let (mut cfg, _) = load_config::<TrainCliConfig>(args.config.as_deref(), &args.set)?;
    cfg.train.seed = seed;
    manifest
        .configs
        .insert("train".into(), serde_json::to_value(&cfg)?);

    let t0 = Instant::now();
    let dataset = Dataset::load(&args.dataset)?;
    let field = match &args.init {
        Some(path) => VoxelField::load(path)?,
        None => VoxelField::new(
            field_bounds(&dataset, cfg.z_headroom)?,
            cfg.resolution,
            FieldInit::default(),
        )?,
    };
    manifest
        .wall_time_s
        .insert("load".into(), t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let (field, history) = fit(field, &dataset, &cfg.train, Some(&args.out))?;
    manifest
        .wall_time_s
        .insert("train".into(), t1.elapsed().as_secs_f64());

    field.save(&args.out.join("field.cnpl"))?;
    manifest.artifacts.push("field.cnpl".into());
    manifest.artifacts.push("train_log.csv".into());
    if let Some(last) = history.last() {
        manifest
            .notes
            .insert("final_loss".into(), serde_json::json!(last.loss));
    }
    manifest.write(&args.out)
}

pub fn cmd_render(args: &RenderArgs, seed: u64) -> Result<()> {
    if args.crop && args.dtm.is_none() {
        return Err(Error::input("--crop requires --dtm"));
    }
    let mut manifest = RunManifest::new("render", seed);
    let field = VoxelField::load(&args.checkpoint)?;
    let records: Vec<CameraRecord> = read_json(&args.cameras)?;
    let dtm: Option<Dtm> = match &args.dtm {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let cfg = RenderConfig {
        n_samples: args.samples,
        jitter: false,
        background: args.background,
    };
    std::fs::create_dir_all(&args.out)?;

    let t0 = Instant::now();
    for rec in &records {
        let camera = rec.to_camera()?;
        let policy = match (args.crop, args.mask) {
            (false, false) => BoundsPolicy::Full,
            (false, true) => BoundsPolicy::Masked,
            (true, false) => BoundsPolicy::CropDtm {
                dtm: dtm.as_ref().unwrap(),
                margin: args.margin,
            },
            (true, true) => BoundsPolicy::CropDtmMasked {
                dtm: dtm.as_ref().unwrap(),
                margin: args.margin,
            },
        };
        let image = render_image(&field, &camera, &policy, &cfg, seed)?;
        let stem = Path::new(&rec.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| rec.image.clone());
        image.save_png(&args.out.join(format!("{stem}.png")))?;
        if args.float {
            image.save_float(&args.out.join(format!("{stem}.cnpf")))?;
        }
        manifest.artifacts.push(format!("{stem}.png"));
    }
    manifest
        .wall_time_s
        .insert("render".into(), t0.elapsed().as_secs_f64());
    manifest.notes.insert(
        "mode".into(),
        serde_json::json!(match (args.crop, args.mask) {
            (false, false) => "full",
            (false, true) => "mask",
            (true, false) => "crop",
            (true, true) => "crop+mask",
        }),
    );
    manifest.write(&args.out)
}

fn load_image_any(path: &Path) -> Result<ImageBuf> {
    let sidecar = path.with_extension("cnpf");
    if sidecar.exists() {
        ImageBuf::load_float(&sidecar)
    } else {
        ImageBuf::load_png(path)
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(format!("{}: {e}", dir.display())))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let names = list_pngs(&args.rendered)?;
    if names.is_empty() {
        return Err(Error::input(format!(
            "no PNG images in {}",
            args.rendered.display()
        )));
    }
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut ms_values = Vec::new();
    let mut psnr_values = Vec::new();
    for name in &names {
        let reference_path = args.reference.join(name);
        if !reference_path.exists() {
            return Err(Error::input(format!(
                "missing reference image for {name}: {}",
                reference_path.display()
            )));
        }
        let a = load_image_any(&args.rendered.join(name))?;
        let b = load_image_any(&reference_path)?;
        let ms = msssim(&a, &b)?;
        let pv = psnr(&a, &b)?;
        rows.push((format!("msssim/{name}"), ms));
        rows.push((format!("psnr/{name}"), pv));
        ms_values.push(ms);
        psnr_values.push(pv);
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (ms_mean, ms_std) = stats(&ms_values);
    let finite: Vec<f64> = psnr_values.iter().copied().filter(|v| v.is_finite()).collect();
    rows.push(("msssim_mean".into(), ms_mean));
    rows.push(("msssim_std".into(), ms_std));
    if !finite.is_empty() {
        let (p_mean, p_std) = stats(&finite);
        rows.push(("psnr_mean".into(), p_mean));
        rows.push(("psnr_std".into(), p_std));
    }
    let mut csv = String::from("name,value\n");
    for (name, value) in &rows {
        if value.is_finite() {
            csv.push_str(&format!("{name},{value:.6}\n"));
        } else {
            csv.push_str(&format!("{name},inf\n"));
        }
    }
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Stem-counting pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StemsConfig {
    /// Density threshold for point export, 1/m.
    pub density_threshold: f64,
    /// Voxel stride for point export.
    pub stride: usize,
    /// Foliage seed color (linear RGB) for HSV removal.
    pub foliage_rgb: [f64; 3],
    pub hsv_half_width: [f64; 3],
    /// Height band kept above the local terrain, meters.
    pub z_low_offset: f64,
    pub z_high_offset: f64,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub filter: StemFilterConfig,
}

impl Default for StemsConfig {
    fn default() -> Self {
        StemsConfig {
            density_threshold: 20.0,
            stride: 1,
            foliage_rgb: [0.10, 0.45, 0.08],
            hsv_half_width: HsvBox::DEFAULT_HALF_WIDTH,
            z_low_offset: 0.3,
            z_high_offset: 8.0,
            min_cluster_size: 20,
            min_samples: 5,
            filter: StemFilterConfig::default(),
        }
    }
}

pub fn cmd_stems(args: &StemsArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("stems", seed);
    let (cfg, snap) = load_config::<StemsConfig>(args.config.as_deref(), &args.set)?;
    manifest.configs.insert("stems".into(), snap);
    let field = VoxelField::load(&args.checkpoint)?;
    let dtm: Dtm = read_json(&args.dtm)?;
    let out_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    std::fs::create_dir_all(&out_dir)?;

    let t0 = Instant::now();
    let raw = field.export_points(cfg.density_threshold, cfg.stride)?;
    let hsv_box = HsvBox::new(
        crate::analysis::rgb_to_hsv(cfg.foliage_rgb),
        cfg.hsv_half_width,
    )?;
    let no_foliage = remove_foliage_points(&raw, &hsv_box);
    let cropped = crop_points(&no_foliage, &dtm, cfg.z_low_offset, cfg.z_high_offset)?;
    if args.keep_stages {
        raw.save_ply(&out_dir.join("stage1_raw.ply"))?;
        no_foliage.save_ply(&out_dir.join("stage2_no_foliage.ply"))?;
        cropped.save_ply(&out_dir.join("stage3_cropped.ply"))?;
        for stage in 1..=3 {
            manifest
                .artifacts
                .push(format!("stage{stage}_{}.ply", ["raw", "no_foliage", "cropped"][stage - 1]));
        }
    }
    if cropped.points.is_empty() {
        eprintln!("warning: no points survive foliage removal and cropping");
    }
    let positions: Vec<[f64; 3]> = cropped
        .points
        .iter()
        .map(|p| [p.position.x, p.position.y, p.position.z])
        .collect();
    let labels = hdbscan_cluster(
        &positions,
        &HdbscanParams {
            min_cluster_size: cfg.min_cluster_size,
            min_samples: cfg.min_samples,
        },
    )?;
    let report = stem_filter_and_merge(&cropped, &labels, &cfg.filter)?;
    manifest
        .wall_time_s
        .insert("stems".into(), t0.elapsed().as_secs_f64());
    write_json_atomic(&args.out, &report)?;
    manifest.artifacts.push(
        args.out
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    manifest
        .notes
        .insert("stem_count".into(), serde_json::json!(report.stem_count));
    manifest.write(&out_dir)
}

#[derive(Debug, Serialize)]
struct LightingImageReport {
    name: String,
    bimodal: bool,
    bimodality: f64,
    mode_positions: Vec<f64>,
}

pub fn cmd_inspect_lighting(args: &InspectLightingArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    if args.input.is_dir() {
        let images_dir = args.input.join("images");
        let dir = if images_dir.is_dir() {
            images_dir
        } else {
            args.input.clone()
        };
        for name in list_pngs(&dir)? {
            inputs.push(dir.join(name));
        }
        if inputs.is_empty() {
            return Err(Error::input(format!(
                "no images found under {}",
                args.input.display()
            )));
        }
    } else {
        inputs.push(args.input.clone());
    }
    let mut reports = Vec::new();
    let mut n_bimodal = 0usize;
    for path in &inputs {
        let image = load_image_any(path)?;
        let rep = exposure_histogram(&image, args.bins)?;
        if rep.bimodal {
            n_bimodal += 1;
        }
        reports.push(LightingImageReport {
            name: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bimodal: rep.bimodal,
            bimodality: rep.bimodality,
            mode_positions: rep.mode_positions,
        });
    }
    let summary = serde_json::json!({
        "images": reports,
        "fraction_bimodal": n_bimodal as f64 / inputs.len() as f64,
    });
    match &args.out {
        Some(path) => write_json_atomic(path, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, cli.seed),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Render(args) => cmd_render(args, cli.seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Stems(args) => cmd_stems(args, cli.seed),
        Command::InspectLighting(args) => cmd_inspect_lighting(args),
    }
}

/// Parse arguments, run, and map errors to process exit codes.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let exec = || match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    match cli.threads {
        Some(n) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            };
            pool.install(exec)
        }
        None => exec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_type_check() {
        let (cfg, snap) =
            load_config::<ForestParams>(None, &["n_stems=3".into(), "extent=15.0".into()])
                .unwrap();
        assert_eq!(cfg.n_stems, 3);
        assert_eq!(cfg.extent, 15.0);
        assert_eq!(snap["n_stems"], serde_json::json!(3));
        let err = load_config::<ForestParams>(None, &["n_stems".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn train_config_flattens() {
        let (cfg, _) = load_config::<TrainCliConfig>(
            None,
            &["steps=7".into(), "resolution=[8,8,8]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.resolution, [8, 8, 8]);
    }

    #[test]
    fn rgb_parser() {
        assert_eq!(parse_rgb("0.1, 0.2,0.3").unwrap(), [0.1, 0.2, 0.3]);
        assert!(parse_rgb("1,2").is_err());
    }
}
