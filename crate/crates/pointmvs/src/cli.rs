//! Command-line pipeline driver.
//!
//! One binary, five subcommands, each a thin orchestration layer over
//! the library:
//!
//! * `synth` — generate a deterministic synthetic dataset;
//! * `train` — optimize the model on a dataset, writing a checkpoint
//!   and a JSON-lines training log;
//! * `infer` — predict a plane-sweep depth map for one reference view
//!   of a scene and refine it iteratively, writing one depth and one
//!   confidence PFM per iteration;
//! * `fuse` — filter per-view depth maps photometrically and
//!   geometrically and fuse the survivors into a PLY point cloud;
//! * `eval` — compare a reconstructed cloud against a reference cloud
//!   and report accuracy, completeness, overall, and f-score.
//!
//! Every run writes a `manifest.json` audit record next to its
//! outputs. Relative output paths resolve against the directory named
//! by the `POINTMVS_OUT_ROOT` environment variable (current directory
//! when unset); input paths are taken as given. Exit codes: 0 on
//! success, 2 for configuration problems, 3 for data problems, 4 for
//! numerical failures.
//!
//! `infer` refuses a checkpoint whose embedded configuration digest
//! differs from the effective one (config file plus flag overrides):
//! parameters only mean something under the architecture they were
//! trained with. Omitting `--config` uses the checkpoint's own
//! configuration, which always matches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::coarse::{make_planes, predict_coarse};
use crate::config::{Aggregation, Config, KnnMode};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::evaluation::CloudMetrics;
use crate::feature::extract_pyramid;
use crate::fusion;
use crate::geometry::CameraView;
use crate::io::camera::read_camera;
use crate::io::dataset::{list_scenes, ScenePaths};
use crate::io::image::{read_image, read_mask};
use crate::io::manifest::RunManifest;
use crate::io::pfm::{read_pfm, write_pfm};
use crate::io::ply::{read_ply, write_ply};
use crate::pointflow::{refine_iteratively, RefinementSchedule};
use crate::synth::{self, SceneBundle};
use crate::training::{self, Checkpoint};

/// Environment variable naming the directory relative output paths are
/// resolved against.
pub const OUT_ROOT_ENV: &str = "POINTMVS_OUT_ROOT";

// ---------------------------------------------------------------------------
// Argument structures
// ---------------------------------------------------------------------------

/// Coarse-to-fine point-based multi-view stereo pipeline.
#[derive(Debug, Parser)]
#[command(name = "pointmvs", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset with exact cameras and
    /// ground-truth depth.
    Synth(SynthArgs),
    /// Train the model on a dataset directory.
    Train(TrainArgs),
    /// Predict and refine a depth map for one view of a scene.
    Infer(InferArgs),
    /// Filter per-view depth maps and fuse them into a point cloud.
    Fuse(FuseArgs),
    /// Score a reconstructed point cloud against a reference cloud.
    Eval(EvalArgs),
}

/// Architecture and search-strategy switches shared by `train` and
/// `infer`. Each one rewrites the corresponding configuration field,
/// so the resulting checkpoint digest reflects it.
#[derive(Debug, Clone, Copy, Default, Args)]
pub struct ModelOverrides {
    /// Neighbor-search strategy for the point graph.
    #[arg(long, value_enum)]
    pub mode: Option<KnnMode>,
    /// Neighbor reduction in the edge-convolution layers.
    #[arg(long, value_enum)]
    pub aggregation: Option<Aggregation>,
    /// Replace edge features with plain neighbor features, discarding
    /// local geometry relations.
    #[arg(long)]
    pub ablate_edgeconv: bool,
    /// Feed the point network only coarsest-level image features.
    #[arg(long)]
    pub single_level_features: bool,
}

impl ModelOverrides {
    /// Rewrite the configuration fields this instance overrides.
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(mode) = self.mode {
            cfg.refine.knn_mode = mode;
        }
        if let Some(agg) = self.aggregation {
            cfg.model.aggregation = agg;
        }
        if self.ablate_edgeconv {
            cfg.model.ablate_edge_conv = true;
        }
        if self.single_level_features {
            cfg.model.multi_level_features = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Configuration file (built-in defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset seed; scenes derive per-scene seeds from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory to create.
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Configuration file (built-in defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, log, and manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene directory (images and cameras).
    #[arg(long)]
    pub scene: PathBuf,
    /// Configuration file; its digest (after flag overrides) must
    /// match the checkpoint's. Omitted = the checkpoint's own.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Refinement iterations to run; 0 emits only the plane-sweep
    /// output. Defaults to every configured evaluation step.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Source views to match against (defaults to every other view in
    /// the scene).
    #[arg(long)]
    pub views: Option<usize>,
    /// Index of the view to predict depth for.
    #[arg(long, default_value_t = 0)]
    pub reference: usize,
    /// PNG mask restricting refinement to a region of interest, given
    /// at the final output resolution.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// Output directory for depth/confidence maps.
    #[arg(long, default_value = "depths")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Configuration file (built-in defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `infer` outputs; the highest iteration present is
    /// fused for each reference view found.
    #[arg(long)]
    pub depths: PathBuf,
    /// Scene directory supplying the cameras.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory for the fused cloud.
    #[arg(long, default_value = "fused")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Configuration file (built-in defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reconstructed cloud (PLY).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference cloud (PLY).
    #[arg(long)]
    pub gt: PathBuf,
    /// Overrides the configured f-score distance threshold (mm).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output directory for the report and record file.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Resolve an output path: absolute paths pass through, relative ones
/// land under `POINTMVS_OUT_ROOT` when that is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn path_strings(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

/// File name of the depth map for one reference view and iteration
/// (iteration 0 is the plane-sweep output).
pub fn depth_file_name(reference: usize, iteration: usize) -> String {
    format!("depth_ref{reference:04}_it{iteration}.pfm")
}

/// File name of the matching photometric-confidence map.
pub fn confidence_file_name(reference: usize, iteration: usize) -> String {
    format!("conf_ref{reference:04}_it{iteration}.pfm")
}

/// Inverse of [`depth_file_name`]: `(reference, iteration)` when the
/// name matches the pattern.
pub fn parse_depth_file_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_prefix("depth_ref")?.strip_suffix(".pfm")?;
    let (reference, iteration) = stem.split_once("_it")?;
    Some((reference.parse().ok()?, iteration.parse().ok()?))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Generate `config.synth.num_scenes` scenes under the output
/// directory, one subdirectory per scene.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    let out = resolve_out(&args.out);
    let dirs = synth::generate_dataset(&cfg.synth, &out, args.seed)?;
    let manifest = RunManifest::new(
        "synth",
        &cfg.digest(),
        args.seed,
        args.config
            .as_deref()
            .map(|p| path_strings(&[p]))
            .unwrap_or_default(),
        dirs.iter().map(|d| d.display().to_string()).collect(),
        start.elapsed().as_millis() as u64,
    );
    manifest.write(&out.join("manifest.json"))?;
    println!("wrote {} scenes under {}", dirs.len(), out.display());
    Ok(())
}

/// Train on every scene of the dataset, writing `checkpoint.bin`,
/// `train_log.jsonl`, and a manifest. A diverged run still saves the
/// last completed epoch, then exits with a numerical error.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let scene_paths = list_scenes(&args.data)?;
    let scenes = scene_paths
        .iter()
        .map(|p| SceneBundle::load(&p.root))
        .collect::<Result<Vec<_>>>()?;

    let outcome = training::train(&scenes, &cfg)?;

    let out = resolve_out(&args.out);
    create_dir(&out)?;
    let ckpt_path = out.join("checkpoint.bin");
    outcome.checkpoint.save(&ckpt_path)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_text = String::new();
    for record in &outcome.log {
        log_text.push_str(&record.to_json_line());
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;
    let manifest = RunManifest::new(
        "train",
        &cfg.digest(),
        cfg.training.seed,
        path_strings(&[&args.data]),
        path_strings(&[&ckpt_path, &log_path]),
        start.elapsed().as_millis() as u64,
    );
    manifest.write(&out.join("manifest.json"))?;

    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs over {} scenes; final step loss {:.6}",
            outcome.checkpoint.epoch,
            scenes.len(),
            last.loss
        );
    }
    println!("checkpoint: {}", ckpt_path.display());
    if outcome.diverged {
        return Err(Error::numerical(format!(
            "training diverged; {} holds epoch {}, the last one that completed",
            ckpt_path.display(),
            outcome.checkpoint.epoch
        )));
    }
    Ok(())
}

/// Predict the reference view's plane-sweep depth, refine it for the
/// requested number of iterations, and write one depth and one
/// confidence PFM per iteration (iteration 0 = plane-sweep output).
pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let start = Instant::now();
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = match args.config.as_deref() {
        Some(p) => Config::load(p)?,
        None => ckpt.config.clone(),
    };
    args.overrides.apply(&mut cfg);
    if !ckpt.matches_config(&cfg) {
        return Err(Error::config(format!(
            "checkpoint {} was trained under a different configuration \
             (digest {} vs requested {}); pass the matching --config and \
             flags, or omit them to use the checkpoint's own settings",
            args.checkpoint.display(),
            ckpt.config.digest(),
            cfg.digest()
        )));
    }

    let bundle = SceneBundle::load(&args.scene)?;
    let total = bundle.views.len();
    if args.reference >= total {
        return Err(Error::data(format!(
            "--reference {} is out of range for a scene with {total} views",
            args.reference
        )));
    }
    let available = total - 1;
    let sources = args.views.unwrap_or(available);
    if sources == 0 || sources > available {
        return Err(Error::config(format!(
            "--views must be between 1 and {available}, got {sources}"
        )));
    }
    let mut order = vec![args.reference];
    order.extend((0..total).filter(|&i| i != args.reference));
    order.truncate(1 + sources);

    let views: Vec<CameraView> = order.iter().map(|&i| bundle.views[i].clone()).collect();
    let pyramids = order
        .iter()
        .map(|&i| extract_pyramid(&ckpt.params, &bundle.images[i]))
        .collect::<Result<Vec<_>>>()?;
    let planes = make_planes(
        bundle.depth_range.0,
        bundle.depth_range.1,
        cfg.coarse.eval_planes,
    )?;
    let coarse = predict_coarse(
        &ckpt.params,
        &views[0],
        &pyramids[0],
        &views[1..],
        &pyramids[1..],
        &planes,
    )?;

    let all_steps = &cfg.refine.eval_steps;
    let iterations = args.iterations.unwrap_or(all_steps.len());
    if iterations > all_steps.len() {
        return Err(Error::config(format!(
            "--iterations {iterations} exceeds the {} configured evaluation steps",
            all_steps.len()
        )));
    }
    if args.roi.is_some() && iterations == 0 {
        return Err(Error::config(
            "--roi requires at least one refinement iteration",
        ));
    }

    let out = resolve_out(&args.out);
    create_dir(&out)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut emit = |name: String, raster: &Array2<f64>| -> Result<()> {
        let path = out.join(name);
        write_pfm(&path, raster)?;
        outputs.push(path);
        Ok(())
    };
    emit(depth_file_name(args.reference, 0), coarse.depth.raster())?;
    emit(confidence_file_name(args.reference, 0), &coarse.confidence)?;

    if iterations > 0 {
        let schedule =
            RefinementSchedule::with_standard_upsampling(all_steps[..iterations].to_vec())?;
        let roi = args.roi.as_deref().map(read_mask).transpose()?;
        let refined = refine_iteratively(
            &ckpt.params,
            &cfg,
            &coarse.depth,
            &views,
            &pyramids,
            &schedule,
            roi.as_ref(),
        )?;
        for i in 1..=iterations {
            emit(depth_file_name(args.reference, i), refined.maps[i].raster())?;
            emit(
                confidence_file_name(args.reference, i),
                &refined.confidences[i - 1],
            )?;
        }
    }

    let mut inputs = path_strings(&[&args.checkpoint, &args.scene]);
    if let Some(p) = args.config.as_deref() {
        inputs.push(p.display().to_string());
    }
    if let Some(p) = args.roi.as_deref() {
        inputs.push(p.display().to_string());
    }
    let manifest = RunManifest::new(
        "infer",
        &cfg.digest(),
        0,
        inputs,
        outputs.iter().map(|p| p.display().to_string()).collect(),
        start.elapsed().as_millis() as u64,
    );
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "wrote {} maps ({} iterations) under {}",
        outputs.len(),
        iterations,
        out.display()
    );
    Ok(())
}

/// Fuse the highest-iteration depth map of every reference view found
/// in the depths directory into one PLY cloud.
pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(args.config.as_deref())?;

    // Highest iteration present per reference view.
    let mut latest: BTreeMap<usize, usize> = BTreeMap::new();
    let entries =
        std::fs::read_dir(&args.depths).map_err(|e| Error::io(&args.depths, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&args.depths, e))?;
        if let Some((r, it)) = entry
            .file_name()
            .to_str()
            .and_then(parse_depth_file_name)
        {
            let slot = latest.entry(r).or_insert(it);
            *slot = (*slot).max(it);
        }
    }
    if latest.is_empty() {
        return Err(Error::data(format!(
            "{}: no depth_ref*_it*.pfm files found",
            args.depths.display()
        )));
    }

    let scene = ScenePaths::new(&args.scene);
    let mut depths = Vec::with_capacity(latest.len());
    let mut views = Vec::with_capacity(latest.len());
    let mut inputs = path_strings(&[&args.depths, &args.scene]);
    for (&reference, &iteration) in &latest {
        let depth_path = args.depths.join(depth_file_name(reference, iteration));
        let conf_path = args
            .depths
            .join(confidence_file_name(reference, iteration));
        let depth = DepthMap::from_raster(read_pfm(&depth_path)?);
        let confidence = read_pfm(&conf_path)?;
        let image = read_image(&scene.image(reference))?;
        let record = read_camera(&scene.camera(reference))?;
        let (h, w, _) = image.dim();
        let view = record.into_view((w as u32, h as u32))?;
        let threshold = if iteration == 0 {
            cfg.fusion.photometric_threshold_coarse
        } else {
            cfg.fusion.photometric_threshold_flow
        };
        depths.push(fusion::photometric_filter(&depth, &confidence, threshold)?);
        views.push(view);
        inputs.push(depth_path.display().to_string());
    }

    let masks = if depths.len() >= 2 {
        fusion::geometric_filter(&depths, &views, &cfg.fusion)?
    } else {
        vec![depths[0].mask().clone()]
    };
    let cloud = fusion::fuse(&depths, &views, &masks, &cfg.fusion)?;

    let out = resolve_out(&args.out);
    create_dir(&out)?;
    let ply_path = out.join("fused.ply");
    write_ply(&ply_path, &cloud.to_ply())?;
    let manifest = RunManifest::new(
        "fuse",
        &cfg.digest(),
        0,
        inputs,
        path_strings(&[&ply_path]),
        start.elapsed().as_millis() as u64,
    );
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "fused {} views into {} points: {}",
        depths.len(),
        cloud.len(),
        ply_path.display()
    );
    Ok(())
}

/// Score a reconstructed cloud against a reference cloud and emit the
/// report both human- and machine-readable.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(threshold) = args.threshold {
        cfg.eval.fscore_threshold = threshold;
    }
    let pred = read_ply(&args.pred)?;
    let gt = read_ply(&args.gt)?;
    let metrics = CloudMetrics::compute(&pred.points, &gt.points, &cfg.eval)?;

    let report = metrics.render_report();
    let records = metrics.to_json_lines();
    print!("{report}");
    print!("{records}");

    let out = resolve_out(&args.out);
    create_dir(&out)?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    let records_path = out.join("metrics.jsonl");
    std::fs::write(&records_path, &records).map_err(|e| Error::io(&records_path, e))?;
    let manifest = RunManifest::new(
        "eval",
        &cfg.digest(),
        0,
        path_strings(&[&args.pred, &args.gt]),
        path_strings(&[&report_path, &records_path]),
        start.elapsed().as_millis() as u64,
    );
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

/// Dispatch one parsed command.
pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

/// Full program entry: parse, run, map errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
