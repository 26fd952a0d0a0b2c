//! Scratch experiment target for sizing the acceptance fixtures.

use std::collections::BTreeMap;
use std::time::Instant;

use pointmvs::config::{Config, KnnMode};
use pointmvs::pointflow::RefinementSchedule;
use pointmvs::synth::{generate_scene, scene_spec, SceneBundle};
use pointmvs::training::{evaluate_iteration_errors, train, TrainPhase};

fn make_scenes(cfg: &Config, count: usize, base_seed: u64) -> Vec<SceneBundle> {
    (0..count)
        .map(|i| generate_scene(&scene_spec(&cfg.synth, i, base_seed)).unwrap())
        .collect()
}

fn candidate_config(lr: f64, coarse: usize, e2e: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.feature_channels = [4, 6, 8];
    cfg.model.edge_conv_channels = [8, 8, 8];
    cfg.model.flow_head_channels = [12, 6];
    cfg.coarse.train_planes = 16;
    cfg.coarse.eval_planes = 24;
    cfg.refine.knn = 8;
    cfg.refine.knn_mode = KnnMode::Exhaustive;
    cfg.refine.train_steps = vec![8.0, 4.0];
    cfg.refine.eval_steps = vec![8.0, 4.0, 2.0];
    cfg.training.learning_rate = lr;
    cfg.training.decay_every_epochs = 1000;
    cfg.training.coarse_epochs = coarse;
    cfg.training.end_to_end_epochs = e2e;
    cfg.training.num_views = 2;
    cfg.training.seed = 0;
    cfg.synth.num_views = 3;
    cfg.synth.width = 32;
    cfg.synth.height = 32;
    cfg.synth.focal = 40.0;
    cfg.synth.texture_frequency = 8.0;
    cfg
}

/// Mean absolute error of the "always predict the sweep midpoint"
/// strategy on the reference views: the floor any useful model must
/// beat.
fn center_baseline(scenes: &[SceneBundle]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scenes {
        let mid = 0.5 * (s.depth_range.0 + s.depth_range.1);
        let gt = &s.gt_depths[0];
        for (v, m) in gt.raster().iter().zip(gt.mask().iter()) {
            if *m {
                sum += (v - mid).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn probe(tag: &str, cfg: &Config, train_scenes: &[SceneBundle], heldout: &[SceneBundle]) {
    let t0 = Instant::now();
    let outcome = train(train_scenes, cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    assert!(!outcome.diverged, "{tag}: diverged");

    // Mean loss per epoch, split by phase.
    let mut per_epoch: BTreeMap<(usize, bool), (f64, usize)> = BTreeMap::new();
    for r in &outcome.log {
        let e = per_epoch
            .entry((r.epoch, r.phase == TrainPhase::EndToEnd))
            .or_insert((0.0, 0));
        e.0 += r.loss;
        e.1 += 1;
    }
    let mut coarse_curve = Vec::new();
    let mut e2e_curve = Vec::new();
    for ((_, e2e), (sum, n)) in &per_epoch {
        let v = sum / *n as f64;
        if *e2e {
            e2e_curve.push((v * 100.0).round() / 100.0);
        } else {
            coarse_curve.push((v * 100.0).round() / 100.0);
        }
    }
    println!("[{tag}] {secs:.1}s");
    println!("[{tag}] coarse-phase epoch losses: {coarse_curve:?}");
    println!("[{tag}] e2e-phase epoch losses:    {e2e_curve:?}");

    let schedule =
        RefinementSchedule::with_standard_upsampling(cfg.refine.eval_steps.clone()).unwrap();
    let errors =
        evaluate_iteration_errors(&outcome.checkpoint.params, cfg, heldout, &schedule).unwrap();
    let ratios: Vec<f64> = errors
        .iter()
        .map(|e| (e / errors[0] * 1000.0).round() / 1000.0)
        .collect();
    println!(
        "[{tag}] center-baseline {:.2}mm | held-out D0..D3 (mm): {errors:?}",
        center_baseline(heldout)
    );
    println!("[{tag}] ratios: {ratios:?}");
}

#[test]
#[ignore]
fn probe_coarse_only() {
    for lr in [5e-4, 2e-3] {
        let cfg = candidate_config(lr, 12, 0);
        let train_scenes = make_scenes(&cfg, 8, 100);
        let heldout = make_scenes(&cfg, 5, 900);
        probe(&format!("coarse lr={lr}"), &cfg, &train_scenes, &heldout);
    }
}

#[test]
#[ignore]
fn probe_geometry() {
    // (focal px, arc rad, texture frequency): stronger parallax and a
    // texture scale matched to the visible patch.
    let variants: &[(f64, f64, f64)] = &[
        (40.0, 0.06, 8.0),
        (40.0, 0.40, 8.0),
        (80.0, 0.40, 12.0),
        (80.0, 0.20, 12.0),
        (160.0, 0.40, 25.0),
        (160.0, 0.20, 25.0),
    ];
    for &(focal, arc, tex) in variants {
        let mut cfg = candidate_config(2e-3, 12, 0);
        cfg.synth.focal = focal;
        cfg.synth.arc_step = arc;
        cfg.synth.texture_frequency = tex;
        let train_scenes = make_scenes(&cfg, 8, 100);
        let heldout = make_scenes(&cfg, 5, 900);
        probe(
            &format!("f={focal} arc={arc} tex={tex}"),
            &cfg,
            &train_scenes,
            &heldout,
        );
    }
}

#[test]
#[ignore]
fn probe_scale() {
    // Fix geometry at the best grid point and scale data/epochs/width.
    let variants: &[(usize, usize, [usize; 3], usize)] = &[
        (8, 12, [4, 6, 8], 2),
        (48, 12, [4, 6, 8], 2),
        (48, 30, [4, 6, 8], 2),
        (48, 30, [6, 12, 16], 2),
        (48, 30, [6, 12, 16], 3),
        (128, 40, [6, 12, 16], 3),
    ];
    for &(scenes, epochs, feat, nviews) in variants {
        let mut cfg = candidate_config(2e-3, epochs, 0);
        cfg.synth.arc_step = 0.40;
        cfg.model.feature_channels = feat;
        cfg.training.num_views = nviews;
        let train_scenes = make_scenes(&cfg, scenes, 100);
        let heldout = make_scenes(&cfg, 5, 900);
        probe(
            &format!("n={scenes} ep={epochs} feat={feat:?} views={nviews}"),
            &cfg,
            &train_scenes,
            &heldout,
        );
    }
}

#[test]
#[ignore]
fn probe_texture() {
    // Texture period must survive the 8x downsampling to the coarse
    // level: world period 500/freq mm, pixel footprint depth/focal mm.
    let variants: &[(u32, f64, f64)] = &[
        (32, 40.0, 2.0),
        (32, 40.0, 3.0),
        (32, 40.0, 5.0),
        (64, 80.0, 3.0),
        (64, 80.0, 5.0),
    ];
    for &(size, focal, tex) in variants {
        let mut cfg = candidate_config(2e-3, 30, 0);
        cfg.synth.arc_step = 0.40;
        cfg.synth.width = size;
        cfg.synth.height = size;
        cfg.synth.focal = focal;
        cfg.synth.texture_frequency = tex;
        let train_scenes = make_scenes(&cfg, 48, 100);
        let heldout = make_scenes(&cfg, 5, 900);
        probe(
            &format!("px={size} f={focal} tex={tex}"),
            &cfg,
            &train_scenes,
            &heldout,
        );
    }
}

#[test]
#[ignore]
fn probe_full_training() {
    let cfg = candidate_config(2e-3, 10, 10);
    let train_scenes = make_scenes(&cfg, 8, 100);
    let heldout = make_scenes(&cfg, 5, 900);
    probe("full", &cfg, &train_scenes, &heldout);
}
