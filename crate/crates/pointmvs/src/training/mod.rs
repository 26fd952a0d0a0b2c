//! Optimization of the full depth-prediction chain.
//!
//! Training runs in two phases. The first optimizes only the
//! plane-sweep stage (feature extractor and cost-volume regularizer)
//! against the expected-depth output; the second unrolls the complete
//! chain — coarse prediction plus every refinement iteration — and
//! optimizes all parameters jointly. The objective is an L1 depth
//! loss summed over valid pixels at every iteration's resolution,
//! each term normalized by that iteration's depth spacing so the
//! contributions stay dimensionally comparable:
//!
//! ```text
//! loss = Σ_i (λ_i / s_i) · Σ_{p valid} |gt(p) − pred_i(p)|
//! ```
//!
//! where `s_0` is the coarse plane spacing and `s_i` the hypothesis
//! step of refinement iteration `i`. Ground truth is aligned to each
//! prediction by nearest-neighbor sampling: level pixel `(r, c)` reads
//! full-resolution pixel `(r·f, c·f)`, matching the projection
//! convention used to build the levels themselves.
//!
//! Optimization is RMSProp-style — a decayed average of squared
//! gradients scales each update — with a step size that shrinks by a
//! fixed factor on a fixed epoch schedule. Runs are deterministic
//! given the seed: parameter initialization, scene order, and every
//! forward/backward pass are single-threaded and replayable. If a
//! loss or gradient turns non-finite the loop aborts and returns the
//! checkpoint of the last fully completed epoch.
//!
//! [`gradient_check`] probes named differentiable pieces of the chain
//! against central finite differences; [`Checkpoint`] freezes trained
//! state to a single documented binary file.

pub mod checkpoint;

pub use checkpoint::Checkpoint;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::check::{central_diff, max_rel_err};
use crate::autodiff::{Tape, Var};
use crate::coarse::{coarse_on_tape, make_planes, predict_coarse, soft_argmin_on_tape};
use crate::config::{Config, KnnMode};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::feature::extract_pyramid;
use crate::geometry::{centered_intrinsics, look_at};
use crate::model::{init_params, is_coarse_param, BoundTape, ParamStore};
use crate::pointflow::{
    expected_displacement_on_tape, refine_chain_on_tape, refine_iteratively, RefinementSchedule,
};
use crate::synth::SceneBundle;
use nalgebra::Vector3;

// --- loss ----------------------------------------------------------------

/// Weights and normalizers of the multi-iteration depth loss.
#[derive(Debug, Clone)]
pub struct LossConfig {
    lambdas: Vec<f64>,
    step_sizes: Vec<f64>,
}

impl LossConfig {
    /// One weight and one depth spacing (mm) per iteration, coarse
    /// prediction first.
    pub fn new(lambdas: Vec<f64>, step_sizes: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() || lambdas.len() != step_sizes.len() {
            return Err(Error::config(format!(
                "loss needs matching weight and spacing lists, got {} and {}",
                lambdas.len(),
                step_sizes.len()
            )));
        }
        for &l in &lambdas {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::config(format!("loss weight {l} must be finite and >= 0")));
            }
        }
        for &s in &step_sizes {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::config(format!("loss spacing {s} must be finite and > 0")));
            }
        }
        Ok(Self { lambdas, step_sizes })
    }

    /// Loss settings for a coarse prediction followed by the given
    /// refinement steps: weights come from the run configuration and
    /// the normalizers are `[plane_spacing, steps...]`.
    pub fn for_schedule(cfg: &Config, plane_spacing: f64, refine_steps: &[f64]) -> Result<Self> {
        let lambdas = cfg.lambdas(refine_steps.len() + 1)?;
        let mut step_sizes = vec![plane_spacing];
        step_sizes.extend_from_slice(refine_steps);
        Self::new(lambdas, step_sizes)
    }

    /// Number of prediction maps the loss expects (coarse + refined).
    pub fn iterations(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }
}

/// Ground truth resampled to a prediction resolution, as dense data:
/// target values (zero where unusable), a 0/1 mask of pixels valid in
/// both maps, and the surviving pixel count.
fn aligned_target(
    gt: &DepthMap,
    dim: (usize, usize),
    pred_mask: &Array2<bool>,
) -> Result<(Array2<f64>, Array2<f64>, usize)> {
    let (gh, gw) = gt.dim();
    let (h, w) = dim;
    let aligned = if (gh, gw) == (h, w) {
        gt.clone()
    } else {
        if h == 0 || w == 0 || gh % h != 0 || gw % w != 0 || gh / h != gw / w {
            return Err(Error::data(format!(
                "cannot align {gh}x{gw} ground truth to a {h}x{w} prediction"
            )));
        }
        gt.downsample(gh / h)?
    };
    let target = Array2::from_shape_fn((h, w), |p| {
        if aligned.mask()[p] {
            aligned.raster()[p]
        } else {
            0.0
        }
    });
    let mut count = 0usize;
    let mask = Array2::from_shape_fn((h, w), |p| {
        if aligned.mask()[p] && pred_mask[p] {
            count += 1;
            1.0
        } else {
            0.0
        }
    });
    Ok((target, mask, count))
}

/// Tape nodes of the multi-iteration loss: the total and the weighted
/// per-iteration terms it sums.
pub struct LossTapes {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Multi-iteration L1 depth loss as a tape expression.
///
/// `preds[i]` is a `[h, w]` depth node with `masks[i]` marking which
/// of its pixels carry a prediction; ground truth is aligned to each
/// resolution as described in the module docs. Every iteration must
/// keep at least one pixel that is valid in both maps.
pub fn multi_iteration_loss_on_tape(
    tape: &mut Tape,
    preds: &[Var],
    masks: &[Array2<bool>],
    gt: &DepthMap,
    cfg: &LossConfig,
) -> Result<LossTapes> {
    if preds.len() != cfg.iterations() {
        return Err(Error::data(format!(
            "{} predictions for a loss configured with {} iterations",
            preds.len(),
            cfg.iterations()
        )));
    }
    if preds.len() != masks.len() {
        return Err(Error::data(format!(
            "{} predictions but {} masks",
            preds.len(),
            masks.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (i, (&pred, mask)) in preds.iter().zip(masks).enumerate() {
        let shape = tape.value(pred).shape().to_vec();
        if shape != [mask.nrows(), mask.ncols()] {
            return Err(Error::data(format!(
                "iteration {i} prediction {shape:?} does not match its {:?} mask",
                mask.dim()
            )));
        }
        let (target, both, count) = aligned_target(gt, mask.dim(), mask)?;
        if count == 0 {
            return Err(Error::data(format!(
                "iteration {i} has no pixel valid in both prediction and ground truth"
            )));
        }
        let l1 = tape.l1_masked(pred, target.into_dyn(), both.into_dyn());
        terms.push(tape.scale(l1, cfg.lambdas[i] / cfg.step_sizes[i]));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(LossTapes { total, terms })
}

/// Multi-iteration L1 depth loss over plain depth maps.
///
/// Matches the tape version bit for bit on the same inputs.
pub fn multi_iteration_loss(preds: &[DepthMap], gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    if preds.len() != cfg.iterations() {
        return Err(Error::data(format!(
            "{} predictions for a loss configured with {} iterations",
            preds.len(),
            cfg.iterations()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (i, pred) in preds.iter().enumerate() {
        let (target, mask, count) = aligned_target(gt, pred.dim(), pred.mask())?;
        if count == 0 {
            return Err(Error::data(format!(
                "iteration {i} has no pixel valid in both prediction and ground truth"
            )));
        }
        let mut term = 0.0;
        Zip::from(pred.raster())
            .and(&target)
            .and(&mask)
            .for_each(|&p, &t, &m| {
                term += m * (p - t).abs();
            });
        terms.push(term * (cfg.lambdas[i] / cfg.step_sizes[i]));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total += t;
    }
    Ok(total)
}

// --- optimizer -----------------------------------------------------------

/// Root-mean-square gradient scaling: each parameter keeps a decayed
/// average of its squared gradients and divides the update by its
/// square root, so step sizes adapt per coordinate.
#[derive(Debug, Clone)]
pub struct RmsProp {
    decay: f64,
    epsilon: f64,
    acc: BTreeMap<String, ArrayD<f64>>,
}

impl RmsProp {
    pub fn new(decay: f64, epsilon: f64) -> Result<Self> {
        Self::from_state(decay, epsilon, BTreeMap::new())
    }

    /// Resume with existing squared-gradient accumulators.
    pub fn from_state(
        decay: f64,
        epsilon: f64,
        acc: BTreeMap<String, ArrayD<f64>>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!(
                "squared-gradient decay {decay} must lie in [0, 1)"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!(
                "optimizer epsilon {epsilon} must be finite and > 0"
            )));
        }
        Ok(Self { decay, epsilon, acc })
    }

    /// Squared-gradient accumulators, for checkpointing.
    pub fn state(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.acc
    }

    /// Apply one update: `acc = decay·acc + (1−decay)·g²` followed by
    /// `θ -= lr·g / (√acc + ε)`. Parameters absent from `grads` are
    /// untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        learning_rate: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let param = store.get_mut(name)?;
            if g.shape() != param.shape() {
                return Err(Error::data(format!(
                    "gradient for {name:?} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let acc = self
                .acc
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            Zip::from(param)
                .and(acc)
                .and(g)
                .for_each(|p, a, &gv| {
                    *a = self.decay * *a + (1.0 - self.decay) * gv * gv;
                    *p -= learning_rate * gv / (a.sqrt() + self.epsilon);
                });
        }
        Ok(())
    }
}

// --- training loop -------------------------------------------------------

/// Which part of the chain an epoch optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    /// Plane-sweep stage alone (feature extractor + regularizer).
    Coarse,
    /// Full chain through every refinement iteration.
    EndToEnd,
}

/// One optimization step, as recorded in the line-delimited training
/// log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based epoch the step belongs to, counted across both phases.
    pub epoch: usize,
    pub phase: TrainPhase,
    /// Index of the scene in the training set.
    pub scene: usize,
    pub learning_rate: f64,
    /// Weighted loss terms, one per prediction iteration.
    pub terms: Vec<f64>,
    /// Sum of the terms.
    pub loss: f64,
}

impl TrainRecord {
    /// The record as one JSON log line (without trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// What a training run produced.
pub struct TrainOutcome {
    /// State after the last fully completed epoch.
    pub checkpoint: Checkpoint,
    /// One record per optimization step, in execution order.
    pub log: Vec<TrainRecord>,
    /// True when a non-finite loss or gradient aborted the run early;
    /// the checkpoint then predates the divergence.
    pub diverged: bool,
}

/// Optimize all parameters over the given scenes.
///
/// Phase one trains the plane-sweep stage alone for
/// `training.coarse_epochs`; phase two unrolls refinement with the
/// `refine.train_steps` schedule and trains everything for
/// `training.end_to_end_epochs`. Scene order reshuffles every epoch
/// from the run seed. Depth planes and loss normalizers adapt to each
/// scene's stored sweep range.
pub fn train(scenes: &[SceneBundle], cfg: &Config) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::data("training needs at least one scene"));
    }
    if cfg.training.num_views == 0 {
        return Err(Error::config("training needs at least one source view"));
    }
    for (i, scene) in scenes.iter().enumerate() {
        if scene.views.len() < 2 {
            return Err(Error::data(format!(
                "scene {i} has {} views; the chain needs a reference plus sources",
                scene.views.len()
            )));
        }
        if scene.gt_depths.is_empty() {
            return Err(Error::data(format!("scene {i} carries no ground-truth depth")));
        }
    }

    let schedule = RefinementSchedule::with_standard_upsampling(cfg.refine.train_steps.clone())?;
    // Validate the weight list up front even though spacings are
    // per-scene.
    cfg.lambdas(schedule.iterations() + 1)?;

    let mut store = init_params(cfg, cfg.training.seed);
    let mut opt = RmsProp::new(cfg.training.rms_decay, cfg.training.rms_epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut log = Vec::new();
    let mut last_good = Checkpoint {
        config: cfg.clone(),
        epoch: 0,
        params: store.clone(),
        rms_acc: opt.state().clone(),
    };

    let total_epochs = cfg.training.coarse_epochs + cfg.training.end_to_end_epochs;
    let decay_every = cfg.training.decay_every_epochs.max(1);
    for epoch in 0..total_epochs {
        let phase = if epoch < cfg.training.coarse_epochs {
            TrainPhase::Coarse
        } else {
            TrainPhase::EndToEnd
        };
        let lr = cfg.training.learning_rate
            * cfg.training.decay_factor.powi((epoch / decay_every) as i32);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);

        for &si in &order {
            let scene = &scenes[si];
            let count = (1 + cfg.training.num_views).min(scene.views.len());
            let views = &scene.views[..count];
            let images = &scene.images[..count];
            let planes = make_planes(
                scene.depth_range.0,
                scene.depth_range.1,
                cfg.coarse.train_planes,
            )?;

            let mut bt = BoundTape::new();
            let tapes = coarse_on_tape(&mut bt, &store, views, images, &planes)?;
            let dim = {
                let s = bt.tape.value(tapes.depth).shape();
                (s[0], s[1])
            };
            let all_valid = Array2::from_elem(dim, true);
            let (preds, masks, lcfg) = match phase {
                TrainPhase::Coarse => (
                    vec![tapes.depth],
                    vec![all_valid],
                    LossConfig::new(vec![cfg.lambdas(1)?[0]], vec![planes.spacing()])?,
                ),
                TrainPhase::EndToEnd => {
                    let chain = refine_chain_on_tape(
                        &mut bt,
                        &store,
                        cfg,
                        tapes.depth,
                        &all_valid,
                        views,
                        &tapes.pyramids,
                        &schedule,
                    )?;
                    let lcfg =
                        LossConfig::for_schedule(cfg, planes.spacing(), schedule.steps())?;
                    (chain.depths, chain.masks, lcfg)
                }
            };

            let loss_tapes =
                multi_iteration_loss_on_tape(&mut bt.tape, &preds, &masks, &scene.gt_depths[0], &lcfg)?;
            let loss = bt.tape.scalar(loss_tapes.total);
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    log,
                    diverged: true,
                });
            }
            let terms: Vec<f64> = loss_tapes.terms.iter().map(|&t| bt.tape.scalar(t)).collect();

            let grads = bt.tape.backward(loss_tapes.total);
            let mut gmap: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            let keep_all = phase == TrainPhase::EndToEnd;
            for (name, var) in bt.bound() {
                if !(keep_all || is_coarse_param(name)) {
                    continue;
                }
                let Some(g) = grads.wrt(*var) else { continue };
                if g.iter().any(|v| !v.is_finite()) {
                    return Ok(TrainOutcome {
                        checkpoint: last_good,
                        log,
                        diverged: true,
                    });
                }
                gmap.insert(name.clone(), g.clone());
            }
            drop(grads);
            drop(bt);
            opt.step(&mut store, &gmap, lr)?;
            log.push(TrainRecord {
                epoch: epoch + 1,
                phase,
                scene: si,
                learning_rate: lr,
                terms,
                loss,
            });
        }

        last_good = Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            params: store.clone(),
            rms_acc: opt.state().clone(),
        };
    }

    Ok(TrainOutcome {
        checkpoint: last_good,
        log,
        diverged: false,
    })
}

/// Mean absolute depth error of each prediction iteration, pooled
/// over the given scenes.
///
/// Runs the plain inference chain (coarse prediction plus the given
/// refinement schedule, evaluation plane count, per-scene sweep
/// range) on every scene and compares each iteration's map against
/// ground truth aligned to its resolution. Entry `0` is the coarse
/// map.
pub fn evaluate_iteration_errors(
    store: &ParamStore,
    cfg: &Config,
    scenes: &[SceneBundle],
    schedule: &RefinementSchedule,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::data("evaluation needs at least one scene"));
    }
    let levels = schedule.iterations() + 1;
    let mut sums = vec![0.0; levels];
    let mut counts = vec![0usize; levels];
    for scene in scenes {
        let pyramids: Vec<_> = scene
            .images
            .iter()
            .map(|img| extract_pyramid(store, img))
            .collect::<Result<_>>()?;
        let planes = make_planes(
            scene.depth_range.0,
            scene.depth_range.1,
            cfg.coarse.eval_planes,
        )?;
        let coarse = predict_coarse(
            store,
            &scene.views[0],
            &pyramids[0],
            &scene.views[1..],
            &pyramids[1..],
            &planes,
        )?;
        let refined = refine_iteratively(
            store,
            cfg,
            &coarse.depth,
            &scene.views,
            &pyramids,
            schedule,
            None,
        )?;
        for (i, map) in refined.maps.iter().enumerate() {
            let (target, mask, count) = aligned_target(&scene.gt_depths[0], map.dim(), map.mask())?;
            Zip::from(map.raster())
                .and(&target)
                .and(&mask)
                .for_each(|&p, &t, &m| {
                    sums[i] += m * (p - t).abs();
                });
            counts[i] += count;
        }
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (&s, &c))| {
            if c == 0 {
                Err(Error::data(format!(
                    "iteration {i} has no pixel valid in both prediction and ground truth"
                )))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

// --- gradient verification -----------------------------------------------

/// Differentiable pieces of the chain that [`gradient_check`] can
/// probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckTarget {
    /// Dense affine layer; errors sit at roundoff scale (< 1e-10).
    Linear,
    /// Probability-weighted expected depth over planes (< 1e-6).
    SoftArgmin,
    /// Bilinear feature-map sampling, including the gradient through
    /// the sample coordinates (< 1e-4).
    FeatureFetch,
    /// Per-channel variance across views (< 1e-4).
    VarianceAcrossViews,
    /// Probability-weighted signed depth offset (< 1e-4).
    ExpectedDisplacement,
    /// One full refinement iteration on a 4×4 coarse grid,
    /// differentiated against a feature-pyramid level (< 1e-3).
    RefinementIteration,
}

/// Compare analytic gradients of the chosen component against central
/// finite differences on a small deterministic probe; returns the
/// largest relative error over all probed inputs.
pub fn gradient_check(target: GradCheckTarget, seed: u64) -> Result<f64> {
    match target {
        GradCheckTarget::Linear => check_linear(seed),
        GradCheckTarget::SoftArgmin => check_soft_argmin(seed),
        GradCheckTarget::FeatureFetch => check_feature_fetch(seed),
        GradCheckTarget::VarianceAcrossViews => check_variance(seed),
        GradCheckTarget::ExpectedDisplacement => check_expected_displacement(seed),
        GradCheckTarget::RefinementIteration => check_refinement_iteration(seed),
    }
}

/// FD-vs-analytic comparison of a scalar objective over every listed
/// input, rebuilding the tape from scratch per displaced element.
fn fd_over_inputs(
    inputs: &[ArrayD<f64>],
    h: f64,
    build: &dyn Fn(&mut Tape, &[ArrayD<f64>]) -> (Vec<Var>, Var),
) -> f64 {
    let mut tape = Tape::new();
    let (leaves, root) = build(&mut tape, inputs);
    let grads = tape.backward(root);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(leaves[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let numeric = central_diff(
            |x: &ArrayD<f64>| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                let mut t = Tape::new();
                let (_, r) = build(&mut t, &probe);
                t.scalar(r)
            },
            input,
            h,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| lo + (hi - lo) * rng.random::<f64>())
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Positive entries keep every gradient well away from zero, so
    // the relative error reflects roundoff rather than cancellation.
    let inputs = vec![
        random_array(&mut rng, &[6, 4], 0.5, 1.5),
        random_array(&mut rng, &[3, 4], 0.5, 1.5),
        random_array(&mut rng, &[3], 0.5, 1.5),
    ];
    Ok(fd_over_inputs(&inputs, 1e-3, &|tape, ins| {
        let x = tape.leaf(ins[0].clone());
        let w = tape.leaf(ins[1].clone());
        let b = tape.leaf(ins[2].clone());
        let y = tape.linear(x, w, b);
        (vec![x, w, b], tape.sum_all(y))
    }))
}

fn check_soft_argmin(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Unit-scale depths keep the objective small, so finite-difference
    // roundoff stays far below the tolerance.
    let planes = make_planes(0.5, 1.5, 6)?;
    let inputs = vec![random_array(&mut rng, &[6, 3, 3], -1.0, 1.0)];
    Ok(fd_over_inputs(&inputs, 1e-5, &|tape, ins| {
        let logits = tape.leaf(ins[0].clone());
        let probs = tape.softmax_axis(logits, 0);
        let depth = soft_argmin_on_tape(tape, probs, &planes)
            .expect("fixed probe shapes are valid");
        (vec![logits], tape.sum_all(depth))
    }))
}

fn check_feature_fetch(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = random_array(&mut rng, &[3, 6, 7], 0.0, 1.0);
    // Sample points keep fractional parts in [0.3, 0.7]: the bilinear
    // weights are non-differentiable exactly at integer coordinates.
    let mut pix = ArrayD::zeros(ndarray::IxDyn(&[5, 2]));
    for p in 0..5 {
        let cu = rng.random_range(0..6usize) as f64;
        let cv = rng.random_range(0..5usize) as f64;
        pix[[p, 0]] = cu + 0.3 + 0.4 * rng.random::<f64>();
        pix[[p, 1]] = cv + 0.3 + 0.4 * rng.random::<f64>();
    }
    let inputs = vec![map, pix];
    Ok(fd_over_inputs(&inputs, 1e-5, &|tape, ins| {
        let m = tape.leaf(ins[0].clone());
        let p = tape.leaf(ins[1].clone());
        let fetched = tape.bilinear_fetch(m, p);
        (vec![m, p], tape.sum_all(fetched))
    }))
}

fn check_variance(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random_array(&mut rng, &[3, 5, 4], 0.0, 1.0)];
    Ok(fd_over_inputs(&inputs, 1e-5, &|tape, ins| {
        let x = tape.leaf(ins[0].clone());
        let v = tape.variance_views(x);
        (vec![x], tape.sum_all(v))
    }))
}

fn check_expected_displacement(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random_array(&mut rng, &[6, 5], -1.0, 1.0)];
    Ok(fd_over_inputs(&inputs, 1e-5, &|tape, ins| {
        let logits = tape.leaf(ins[0].clone());
        let probs = tape.softmax_axis(logits, 1);
        let disp = expected_displacement_on_tape(tape, probs, 4.0, 2);
        (vec![logits], tape.sum_all(disp))
    }))
}

fn check_refinement_iteration(seed: u64) -> Result<f64> {
    let mut cfg = Config::default();
    cfg.model.feature_channels = [3, 4, 5];
    cfg.model.edge_conv_channels = [8, 8, 8];
    cfg.model.flow_head_channels = [12, 6];
    cfg.refine.knn = 8;
    cfg.refine.knn_mode = KnnMode::Exhaustive;
    let mut store = init_params(&cfg, seed);
    // Zero-initialized biases park some ReLU preactivations exactly at
    // the kink; nudging every parameter moves the probe to a generic
    // point where finite differences are trustworthy.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        for v in store.get_mut(name)?.iter_mut() {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }

    let size = (32u32, 32u32);
    let k = centered_intrinsics(1.2 * 32.0, size);
    let focus = Vector3::new(0.0, 0.0, 600.0);
    let views = vec![
        look_at(k, Vector3::zeros(), focus, size)?,
        look_at(k, Vector3::new(70.0, 10.0, 0.0), focus, size)?,
        look_at(k, Vector3::new(-60.0, -15.0, 0.0), focus, size)?,
    ];
    let mut pyramid_arrays: Vec<Vec<ArrayD<f64>>> = Vec::new();
    for _ in &views {
        let img = Array3::from_shape_fn((32, 32, 3), |_| rng.random::<f64>());
        let pyr = extract_pyramid(&store, &img)?;
        pyramid_arrays.push(
            (0..3)
                .map(|li| Ok(pyr.level(li)?.clone().into_dyn()))
                .collect::<Result<_>>()?,
        );
    }
    let coarse =
        Array2::from_shape_fn((4, 4), |(r, c)| 575.0 + 9.0 * c as f64 + 5.0 * r as f64);
    let mask = Array2::from_elem((4, 4), true);
    let schedule = RefinementSchedule::new(vec![4.0], vec![1])?;

    // Differentiate the mean refined depth against the reference
    // view's deepest pyramid level, the one the hypothesis features
    // always sample.
    let probe_at = (0usize, 2usize);
    let build = |probe: &ArrayD<f64>| -> (Var, Var, BoundTape) {
        let mut bt = BoundTape::new();
        let mut taps = Vec::new();
        for (vi, levels) in pyramid_arrays.iter().enumerate() {
            let mut row = Vec::new();
            for (li, level) in levels.iter().enumerate() {
                let arr = if (vi, li) == probe_at {
                    probe.clone()
                } else {
                    level.clone()
                };
                row.push(bt.tape.leaf(arr));
            }
            taps.push([row[0], row[1], row[2]]);
        }
        let coarse_leaf = bt.tape.leaf(coarse.clone().into_dyn());
        let chain = refine_chain_on_tape(
            &mut bt,
            &store,
            &cfg,
            coarse_leaf,
            &mask,
            &views,
            &taps,
            &schedule,
        )
        .expect("fixed probe scene is valid");
        let last = *chain.depths.last().expect("single-iteration schedule");
        let total = bt.tape.sum_all(last);
        let root = bt.tape.scale(total, 1.0 / 16.0);
        (taps[probe_at.0][probe_at.1], root, bt)
    };

    let base = pyramid_arrays[probe_at.0][probe_at.1].clone();
    let (tap, root, bt) = build(&base);
    let grads = bt.tape.backward(root);
    let analytic = grads
        .wrt(tap)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
    let numeric = central_diff(
        |x: &ArrayD<f64>| {
            let (_, root, bt) = build(x);
            bt.tape.scalar(root)
        },
        &base,
        1e-4,
    );
    Ok(max_rel_err(&analytic, &numeric))
}
