//! Runtime configuration.
//!
//! One [`Config`] value drives every stage of the pipeline. It is read
//! from a TOML file with section tables mirroring the struct fields
//! here; omitted keys fall back to the defaults below, which encode
//! the reference training protocol (plane range 425–921 mm, 48/96
//! sweep planes, displacement half-count m = 2, 16 neighbors, two
//! training iterations at 8 mm / 4 mm steps, three evaluation
//! iterations). A checked-in copy of the defaults lives at
//! `configs/default.toml`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Symmetric reduction used over each point's neighbor edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Avg,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Max => write!(f, "max"),
            Aggregation::Avg => write!(f, "avg"),
        }
    }
}

/// Neighbor-search strategy for the point graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KnnMode {
    /// True k-nearest-neighbors over all hypothesis points.
    Exhaustive,
    /// Candidates limited to a pixel window around each point's source
    /// pixel (all hypothesis layers included), then the nearest k.
    Windowed,
}

impl fmt::Display for KnnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnnMode::Exhaustive => write!(f, "exhaustive"),
            KnnMode::Windowed => write!(f, "windowed"),
        }
    }
}

/// Network architecture knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the three feature-pyramid levels (1/2, 1/4,
    /// 1/8 resolution).
    pub feature_channels: [usize; 3],
    /// Channel widths of the cost-volume regularizer's encoder stages.
    pub regularizer_channels: [usize; 3],
    /// Output widths of the three edge-convolution layers.
    pub edge_conv_channels: [usize; 3],
    /// Hidden widths of the shared per-point head that maps the
    /// concatenated edge-conv outputs to one scalar per hypothesis.
    pub flow_head_channels: [usize; 2],
    /// Feed the point network variance features from all three pyramid
    /// levels (`false` restricts it to the coarsest level only).
    pub multi_level_features: bool,
    /// Replace the edge features `(C_p, C_p - C_q)` with the plain
    /// neighbor feature `C_q`, discarding local geometry relations.
    pub ablate_edge_conv: bool,
    /// Neighbor reduction in the edge-convolution layers.
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: [8, 16, 32],
            regularizer_channels: [8, 16, 32],
            edge_conv_channels: [64, 64, 64],
            flow_head_channels: [128, 64],
            multi_level_features: true,
            ablate_edge_conv: false,
            aggregation: Aggregation::Max,
        }
    }
}

/// Plane-sweep stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    /// Nearest sweep plane (mm).
    pub depth_min: f64,
    /// Farthest sweep plane (mm).
    pub depth_max: f64,
    /// Plane count during training.
    pub train_planes: usize,
    /// Plane count during evaluation/inference.
    pub eval_planes: usize,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            depth_min: 425.0,
            depth_max: 921.0,
            train_planes: 48,
            eval_planes: 96,
        }
    }
}

/// Point-refinement stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Hypothesis half-count: each point spawns 2m+1 candidates.
    pub m: usize,
    /// Neighbors per point in the graph.
    pub knn: usize,
    /// Neighbor-search strategy.
    pub knn_mode: KnnMode,
    /// Pixel-window side length for windowed search (odd).
    pub knn_window: usize,
    /// Hypothesis step sizes (mm) per training iteration; the list
    /// length is the training iteration count.
    pub train_steps: Vec<f64>,
    /// Hypothesis step sizes (mm) per evaluation iteration.
    pub eval_steps: Vec<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            m: 2,
            knn: 16,
            knn_mode: KnnMode::Windowed,
            knn_window: 9,
            train_steps: vec![8.0, 4.0],
            eval_steps: vec![8.0, 4.0, 2.0],
        }
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Initial learning rate.
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay factor.
    pub decay_factor: f64,
    /// Apply the decay every this many epochs.
    pub decay_every_epochs: usize,
    /// Epochs spent training the plane-sweep stage alone.
    pub coarse_epochs: usize,
    /// Epochs of subsequent end-to-end training.
    pub end_to_end_epochs: usize,
    /// Per-iteration loss weights; a single entry is broadcast to all
    /// iterations.
    pub lambdas: Vec<f64>,
    /// Squared-gradient averaging coefficient of the optimizer.
    pub rms_decay: f64,
    /// Denominator floor of the optimizer update.
    pub rms_epsilon: f64,
    /// Source views used per training sample (reference excluded).
    pub num_views: usize,
    /// Master seed for parameter initialization and data order.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            decay_factor: 0.9,
            decay_every_epochs: 2,
            coarse_epochs: 4,
            end_to_end_epochs: 12,
            lambdas: vec![1.0],
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            num_views: 2,
            seed: 0,
        }
    }
}

/// Depth-map filtering and fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Minimum photometric confidence for depths from the plane-sweep
    /// stage.
    pub photometric_threshold_coarse: f64,
    /// Minimum photometric confidence for refined depths.
    pub photometric_threshold_flow: f64,
    /// Maximum cross-view depth discrepancy (mm) counted as
    /// consistent.
    pub geometric_max_discrepancy: f64,
    /// Minimum number of consistent views (the reference view counts
    /// itself).
    pub min_consistent_views: usize,
    /// Average near-coincident points from different reference views.
    pub merge_duplicates: bool,
    /// Distance (mm) under which fused points are considered
    /// duplicates.
    pub merge_radius: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            photometric_threshold_coarse: 0.5,
            photometric_threshold_flow: 0.2,
            geometric_max_discrepancy: 0.12,
            min_consistent_views: 3,
            merge_duplicates: true,
            merge_radius: 0.2,
        }
    }
}

/// Synthetic-scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Scenes to generate.
    pub num_scenes: usize,
    /// Cameras per scene (one reference plus sources).
    pub num_views: usize,
    /// Image width in pixels (divisible by 8).
    pub width: u32,
    /// Image height in pixels (divisible by 8).
    pub height: u32,
    /// Focal length in pixels.
    pub focal: f64,
    /// Nearest scene depth (mm).
    pub depth_min: f64,
    /// Farthest scene depth (mm).
    pub depth_max: f64,
    /// Base spatial frequency of the procedural texture (cycles per
    /// image width, roughly).
    pub texture_frequency: f64,
    /// Angular spacing between neighboring cameras on the arc
    /// (radians).
    pub arc_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scenes: 10,
            num_views: 3,
            width: 160,
            height: 128,
            focal: 200.0,
            depth_min: 425.0,
            depth_max: 921.0,
            texture_frequency: 12.0,
            arc_step: 0.06,
        }
    }
}

/// Point-cloud benchmarking settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Nearest-neighbor distances above this (mm) are excluded from
    /// accuracy/completeness means.
    pub outlier_cap: f64,
    /// Distance threshold (mm) for precision/recall/f-score.
    pub fscore_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            outlier_cap: 20.0,
            fscore_threshold: 1.0,
        }
    }
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub coarse: CoarseConfig,
    pub refine: RefineConfig,
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serialize to TOML.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical TOML form, used to pair checkpoints
    /// with the configuration they were trained under.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-iteration loss weights expanded to `count` entries
    /// (iteration 0 = plane-sweep output). A single configured entry
    /// broadcasts; otherwise the list length must match.
    pub fn lambdas(&self, count: usize) -> Result<Vec<f64>> {
        let l = &self.training.lambdas;
        if l.len() == 1 {
            return Ok(vec![l[0]; count]);
        }
        if l.len() != count {
            return Err(Error::config(format!(
                "training.lambdas has {} entries but {count} loss terms are active",
                l.len()
            )));
        }
        Ok(l.clone())
    }

    /// Check every cross-field constraint, returning the first
    /// violation.
    pub fn validate(&self) -> Result<()> {
        let c = &self.coarse;
        if !(c.depth_min > 0.0 && c.depth_max > c.depth_min) {
            return Err(Error::config(format!(
                "coarse depth range must satisfy 0 < depth_min < depth_max, got [{}, {}]",
                c.depth_min, c.depth_max
            )));
        }
        if c.train_planes < 2 || c.eval_planes < 2 {
            return Err(Error::config("plane counts must be at least 2"));
        }
        let m = &self.model;
        for w in m
            .feature_channels
            .iter()
            .chain(&m.regularizer_channels)
            .chain(&m.edge_conv_channels)
            .chain(&m.flow_head_channels)
        {
            if *w == 0 {
                return Err(Error::config("channel widths must be positive"));
            }
        }
        let r = &self.refine;
        if !(1..=3).contains(&r.m) {
            return Err(Error::config(format!(
                "refine.m must be 1, 2, or 3, got {}",
                r.m
            )));
        }
        if r.knn == 0 {
            return Err(Error::config("refine.knn must be positive"));
        }
        if r.knn_window < 3 || r.knn_window % 2 == 0 {
            return Err(Error::config(format!(
                "refine.knn_window must be odd and at least 3, got {}",
                r.knn_window
            )));
        }
        for steps in [&r.train_steps, &r.eval_steps] {
            for pair in steps.windows(2) {
                if pair[1] >= pair[0] {
                    return Err(Error::config(
                        "refinement step sizes must be strictly decreasing",
                    ));
                }
            }
            if steps.iter().any(|&s| s <= 0.0) {
                return Err(Error::config("step sizes must be positive"));
            }
        }
        let t = &self.training;
        if t.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must be in (0, 1]"));
        }
        if t.decay_every_epochs == 0 {
            return Err(Error::config("decay_every_epochs must be positive"));
        }
        if t.lambdas.is_empty() || t.lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::config(
                "lambdas must be non-empty and non-negative",
            ));
        }
        if !(t.rms_decay > 0.0 && t.rms_decay < 1.0) {
            return Err(Error::config("rms_decay must be in (0, 1)"));
        }
        if t.rms_epsilon <= 0.0 {
            return Err(Error::config("rms_epsilon must be positive"));
        }
        if t.num_views == 0 {
            return Err(Error::config("training.num_views must be positive"));
        }
        let f = &self.fusion;
        for (name, v) in [
            ("photometric_threshold_coarse", f.photometric_threshold_coarse),
            ("photometric_threshold_flow", f.photometric_threshold_flow),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("fusion.{name} must be in [0, 1]")));
            }
        }
        if f.geometric_max_discrepancy <= 0.0 {
            return Err(Error::config(
                "fusion.geometric_max_discrepancy must be positive",
            ));
        }
        if f.min_consistent_views == 0 {
            return Err(Error::config(
                "fusion.min_consistent_views must be positive",
            ));
        }
        if f.merge_radius <= 0.0 {
            return Err(Error::config("fusion.merge_radius must be positive"));
        }
        let s = &self.synth;
        if s.num_views < 2 {
            return Err(Error::config("synth.num_views must be at least 2"));
        }
        if s.width % 8 != 0 || s.height % 8 != 0 || s.width == 0 || s.height == 0 {
            return Err(Error::config(format!(
                "synth resolution must be positive and divisible by 8, got {}x{}",
                s.width, s.height
            )));
        }
        if s.focal <= 0.0 {
            return Err(Error::config("synth.focal must be positive"));
        }
        if !(s.depth_min > 0.0 && s.depth_max > s.depth_min) {
            return Err(Error::config("synth depth range invalid"));
        }
        if s.texture_frequency <= 0.0 {
            return Err(Error::config(
                "synth.texture_frequency must be positive",
            ));
        }
        let e = &self.eval;
        if e.outlier_cap <= 0.0 || e.fscore_threshold <= 0.0 {
            return Err(Error::config(
                "eval thresholds must be positive",
            ));
        }
        Ok(())
    }
}
