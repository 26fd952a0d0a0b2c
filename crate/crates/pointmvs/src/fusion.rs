//! Depth-map post-processing into a single point cloud.
//!
//! Three stages, each independently usable:
//!
//! 1. **Photometric filtering** drops pixels whose prediction
//!    confidence falls below a threshold.
//! 2. **Geometric filtering** keeps a pixel only when enough views
//!    agree about the surface it sees: the pixel unprojects to a world
//!    point, the point projects into every other view, and that view
//!    agrees when its stored depth at the landing pixel matches the
//!    point's depth in its camera (within a tolerance). The pixel's
//!    own view always counts itself.
//! 3. **Fusion** averages, for every surviving pixel, the depths that
//!    the agreeing views imply along the reference ray, unprojects the
//!    mean once, and optionally merges near-coincident points produced
//!    by different reference views.
//!
//! Depth maps may sit at any pyramid level of their view (a coarse
//! map, a refined half-resolution map, or full resolution); the level
//! is inferred from the raster shape. Stored depths are read at the
//! nearest integer pixel of the projected location.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;

use crate::config::FusionConfig;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{project, unproject, CameraView, WorldPoint};
use crate::io::ply::PlyCloud;
use crate::pointflow::map_level;

/// Invalidate every pixel whose confidence falls below `threshold`.
///
/// A zero threshold is the identity; a threshold above the confidence
/// range invalidates everything.
pub fn photometric_filter(
    depth: &DepthMap,
    confidence: &Array2<f64>,
    threshold: f64,
) -> Result<DepthMap> {
    if confidence.dim() != depth.dim() {
        return Err(Error::data(format!(
            "confidence raster {:?} does not match the {:?} depth map",
            confidence.dim(),
            depth.dim()
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::config(format!(
            "photometric threshold {threshold} must be finite"
        )));
    }
    let mut filtered = depth.clone();
    for ((y, x), &c) in confidence.indexed_iter() {
        if c < threshold {
            filtered.invalidate(y, x);
        }
    }
    Ok(filtered)
}

/// The world point a depth-map pixel sees, using the top-left pixel
/// convention: level pixel `(r, c)` rays through full-resolution
/// coordinates `(c·2^L, r·2^L)`.
fn unproject_level_pixel(
    view: &CameraView,
    level: usize,
    r: usize,
    c: usize,
    depth: f64,
) -> Result<WorldPoint> {
    let f = (1u32 << level) as f64;
    unproject(Vector2::new(c as f64 * f, r as f64 * f), depth, view)
}

/// Stored depth of view `b` at the integer pixel nearest to the
/// continuous level-frame location `pixel`, if that pixel is inside
/// the raster and valid.
fn stored_depth_at(map: &DepthMap, pixel: Vector2<f64>) -> Option<(usize, usize, f64)> {
    let (rows, cols) = map.dim();
    let qc = pixel.x.round();
    let qr = pixel.y.round();
    if qc < 0.0 || qr < 0.0 || qc > (cols - 1) as f64 || qr > (rows - 1) as f64 {
        return None;
    }
    let (qr, qc) = (qr as usize, qc as usize);
    map.get(qr, qc).map(|d| (qr, qc, d))
}

fn validate_fusion_inputs(
    depths: &[DepthMap],
    views: &[CameraView],
    cfg: &FusionConfig,
) -> Result<Vec<usize>> {
    if depths.len() != views.len() {
        return Err(Error::data(format!(
            "{} depth maps but {} views",
            depths.len(),
            views.len()
        )));
    }
    if !(cfg.geometric_max_discrepancy > 0.0 && cfg.geometric_max_discrepancy.is_finite()) {
        return Err(Error::config(format!(
            "geometric discrepancy tolerance {} must be finite and > 0",
            cfg.geometric_max_discrepancy
        )));
    }
    if cfg.min_consistent_views == 0 {
        return Err(Error::config(
            "at least one view (the reference itself) must stay consistent",
        ));
    }
    depths
        .iter()
        .zip(views)
        .map(|(d, v)| map_level(v, d.dim()))
        .collect()
}

/// Agreeing views for one pixel: the count and the depth each one
/// implies along the reference ray (own depth first).
fn consistent_samples(
    depths: &[DepthMap],
    views: &[CameraView],
    levels: &[usize],
    a: usize,
    point: &WorldPoint,
    own_depth: f64,
    tolerance: f64,
) -> Vec<f64> {
    let mut samples = vec![own_depth];
    for b in 0..views.len() {
        if b == a {
            continue;
        }
        let Some(hit) = project(point, &views[b], levels[b]) else {
            continue;
        };
        let Some((qr, qc, stored)) = stored_depth_at(&depths[b], hit.pixel) else {
            continue;
        };
        if (stored - hit.depth).abs() <= tolerance {
            // What view b believes the surface is, carried back to the
            // reference ray as a depth sample.
            let Ok(reprojected) = unproject_level_pixel(&views[b], levels[b], qr, qc, stored)
            else {
                continue;
            };
            let cam = views[a].rotation * reprojected.position + views[a].translation;
            if cam.z > 0.0 {
                samples.push(cam.z);
            }
        }
    }
    samples
}

/// Cross-view consistency masks, one per view.
///
/// A pixel survives when at least `cfg.min_consistent_views` views
/// (counting its own) place the surface within
/// `cfg.geometric_max_discrepancy` of where it does.
pub fn geometric_filter(
    depths: &[DepthMap],
    views: &[CameraView],
    cfg: &FusionConfig,
) -> Result<Vec<Array2<bool>>> {
    if views.len() < 2 {
        return Err(Error::data(
            "geometric filtering needs at least two views to compare",
        ));
    }
    let levels = validate_fusion_inputs(depths, views, cfg)?;
    let mut masks = Vec::with_capacity(depths.len());
    for a in 0..depths.len() {
        let (rows, cols) = depths[a].dim();
        let mut keep = Array2::from_elem((rows, cols), false);
        for r in 0..rows {
            for c in 0..cols {
                let Some(d) = depths[a].get(r, c) else { continue };
                let Ok(point) = unproject_level_pixel(&views[a], levels[a], r, c, d) else {
                    continue;
                };
                let samples = consistent_samples(
                    depths,
                    views,
                    &levels,
                    a,
                    &point,
                    d,
                    cfg.geometric_max_discrepancy,
                );
                keep[(r, c)] = samples.len() >= cfg.min_consistent_views;
            }
        }
        masks.push(keep);
    }
    Ok(masks)
}

/// Fused world points with their supporting-view counts.
#[derive(Debug, Clone)]
pub struct FusedPointCloud {
    pub points: Vec<WorldPoint>,
    /// Views that contributed to each point (merged points sum their
    /// contributors).
    pub support: Vec<usize>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bare positions, for metric evaluation.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Convert for PLY output; support counts saturate at 255.
    pub fn to_ply(&self) -> PlyCloud {
        PlyCloud {
            points: self.positions(),
            support: self.support.iter().map(|&s| s.min(255) as u8).collect(),
        }
    }
}

/// Spatial-hash clusterer for near-duplicate merging: each cluster is
/// keyed by its first member's cell, and later points within the merge
/// radius of a cluster's running mean join it.
struct Merger {
    radius: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    sums: Vec<Vector3<f64>>,
    counts: Vec<usize>,
    support: Vec<usize>,
}

impl Merger {
    fn new(radius: f64) -> Self {
        Self {
            radius,
            cells: HashMap::new(),
            sums: Vec::new(),
            counts: Vec::new(),
            support: Vec::new(),
        }
    }

    fn cell_of(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.radius).floor() as i64,
            (p.y / self.radius).floor() as i64,
            (p.z / self.radius).floor() as i64,
        )
    }

    fn push(&mut self, p: Vector3<f64>, support: usize) {
        let (cx, cy, cz) = self.cell_of(&p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in members {
                        let mean = self.sums[i] / self.counts[i] as f64;
                        if (mean - p).norm() <= self.radius {
                            self.sums[i] += p;
                            self.counts[i] += 1;
                            self.support[i] += support;
                            return;
                        }
                    }
                }
            }
        }
        let i = self.sums.len();
        self.sums.push(p);
        self.counts.push(1);
        self.support.push(support);
        self.cells.entry((cx, cy, cz)).or_default().push(i);
    }

    fn finish(self) -> Result<FusedPointCloud> {
        let points = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| WorldPoint::new(s / n as f64))
            .collect::<Result<_>>()?;
        Ok(FusedPointCloud {
            points,
            support: self.support,
        })
    }
}

/// Fuse filtered depth maps into one point cloud.
///
/// For every pixel that is valid in its map and kept by `masks`, the
/// depths implied by all agreeing views average into one sample along
/// the reference ray, which unprojects to a single world point. The
/// mean always lies within the interval of its contributing depths.
/// With `cfg.merge_duplicates`, points from different reference views
/// closer than `cfg.merge_radius` collapse into their average, summing
/// support counts.
pub fn fuse(
    depths: &[DepthMap],
    views: &[CameraView],
    masks: &[Array2<bool>],
    cfg: &FusionConfig,
) -> Result<FusedPointCloud> {
    if depths.is_empty() {
        return Err(Error::data("fusion needs at least one depth map"));
    }
    let levels = validate_fusion_inputs(depths, views, cfg)?;
    if masks.len() != depths.len() {
        return Err(Error::data(format!(
            "{} masks but {} depth maps",
            masks.len(),
            depths.len()
        )));
    }
    for (mask, depth) in masks.iter().zip(depths) {
        if mask.dim() != depth.dim() {
            return Err(Error::data(format!(
                "mask {:?} does not match its {:?} depth map",
                mask.dim(),
                depth.dim()
            )));
        }
    }
    if cfg.merge_duplicates && !(cfg.merge_radius > 0.0 && cfg.merge_radius.is_finite()) {
        return Err(Error::config(format!(
            "merge radius {} must be finite and > 0",
            cfg.merge_radius
        )));
    }

    let mut plain_points = Vec::new();
    let mut plain_support = Vec::new();
    let mut merger = cfg.merge_duplicates.then(|| Merger::new(cfg.merge_radius));
    for a in 0..depths.len() {
        let (rows, cols) = depths[a].dim();
        for r in 0..rows {
            for c in 0..cols {
                if !masks[a][(r, c)] {
                    continue;
                }
                let Some(d) = depths[a].get(r, c) else { continue };
                let point = unproject_level_pixel(&views[a], levels[a], r, c, d)?;
                let samples = consistent_samples(
                    depths,
                    views,
                    &levels,
                    a,
                    &point,
                    d,
                    cfg.geometric_max_discrepancy,
                );
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                let fused = unproject_level_pixel(&views[a], levels[a], r, c, mean)?;
                match &mut merger {
                    Some(m) => m.push(fused.position, samples.len()),
                    None => {
                        plain_points.push(fused);
                        plain_support.push(samples.len());
                    }
                }
            }
        }
    }
    match merger {
        Some(m) => m.finish(),
        None => Ok(FusedPointCloud {
            points: plain_points,
            support: plain_support,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geometry::{centered_intrinsics, look_at};
    use crate::synth::{generate_scene, SceneGeometry, SceneSpec};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fusion_config() -> FusionConfig {
        Config::default().fusion
    }

    fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
        let values = Array2::from_shape_fn((h, w), |_| 550.0 + 100.0 * rng.random::<f64>());
        DepthMap::new(values, Array2::from_elem((h, w), true)).unwrap()
    }

    /// A single camera pose reused twice: projections land exactly on
    /// the source pixel, isolating the depth-comparison logic from
    /// resampling effects.
    fn twin_views(h: usize, w: usize) -> Vec<CameraView> {
        let size = (w as u32, h as u32);
        let k = centered_intrinsics(1.5 * w as f64, size);
        let v = look_at(
            k,
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 600.0),
            size,
        )
        .unwrap();
        vec![v.clone(), v]
    }

    #[test]
    fn photometric_zero_threshold_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let depth = random_depth(&mut rng, 6, 8);
        let conf = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>());
        let out = photometric_filter(&depth, &conf, 0.0).unwrap();
        assert_eq!(out.mask(), depth.mask());
        assert_eq!(out.raster(), depth.raster());
    }

    #[test]
    fn photometric_above_range_invalidates_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let depth = random_depth(&mut rng, 6, 8);
        let conf = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>());
        let out = photometric_filter(&depth, &conf, 1.0 + 1e-12).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn photometric_survivors_match_per_pixel_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth = random_depth(&mut rng, 10, 10);
        let conf = Array2::from_shape_fn((10, 10), |_| rng.random::<f64>());
        let threshold = 0.4;
        let out = photometric_filter(&depth, &conf, threshold).unwrap();
        for ((y, x), &c) in conf.indexed_iter() {
            let want = depth.mask()[(y, x)] && c >= threshold;
            assert_eq!(out.mask()[(y, x)], want, "pixel ({y}, {x})");
        }
    }

    #[test]
    fn photometric_filter_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let depth = random_depth(&mut rng, 8, 8);
        let conf = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let mut previous = usize::MAX;
        for threshold in [0.0, 0.2, 0.5, 0.8, 1.1] {
            let survivors = photometric_filter(&depth, &conf, threshold)
                .unwrap()
                .valid_count();
            assert!(survivors <= previous, "threshold {threshold}");
            previous = survivors;
        }
    }

    #[test]
    fn photometric_rejects_shape_mismatch() {
        let depth = DepthMap::constant(4, 4, 600.0).unwrap();
        let conf = Array2::from_elem((4, 5), 1.0);
        assert!(photometric_filter(&depth, &conf, 0.5).is_err());
    }

    #[test]
    fn identical_depths_survive_geometric_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let depth = random_depth(&mut rng, 6, 8);
        let views = twin_views(6, 8);
        let mut cfg = fusion_config();
        cfg.min_consistent_views = 2;
        let masks = geometric_filter(&[depth.clone(), depth.clone()], &views, &cfg).unwrap();
        for mask in &masks {
            assert!(mask.iter().all(|&k| k));
        }
    }

    #[test]
    fn offset_beyond_tolerance_kills_every_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let depth = random_depth(&mut rng, 6, 8);
        let views = twin_views(6, 8);
        let mut cfg = fusion_config();
        cfg.min_consistent_views = 2;
        let offset = DepthMap::new(
            depth.raster().mapv(|d| d + 2.0 * cfg.geometric_max_discrepancy),
            depth.mask().clone(),
        )
        .unwrap();
        let masks = geometric_filter(&[depth, offset], &views, &cfg).unwrap();
        for mask in &masks {
            assert!(mask.iter().all(|&k| !k));
        }
    }

    /// Three genuinely distinct cameras observing an exact synthetic
    /// surface, with one view's depths randomly perturbed: the
    /// surviving set must match an independently coded per-pixel loop.
    #[test]
    fn randomized_survivors_match_loop_oracle() {
        let spec = SceneSpec {
            geometry: SceneGeometry::Plane {
                depth: 600.0,
                tilt: (0.05, -0.03),
            },
            num_views: 3,
            width: 32,
            height: 32,
            focal: 40.0,
            arc_step: 0.06,
            texture_frequency: 8.0,
            seed: 7,
        };
        let scene = generate_scene(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut depths = scene.gt_depths.clone();
        // Perturb one view around the tolerance so agreement is mixed.
        let mut cfg = fusion_config();
        cfg.geometric_max_discrepancy = 1.0;
        cfg.min_consistent_views = 2;
        let noisy = DepthMap::new(
            depths[1]
                .raster()
                .mapv(|d| d + 2.0 * cfg.geometric_max_discrepancy * (rng.random::<f64>() - 0.5)),
            depths[1].mask().clone(),
        )
        .unwrap();
        depths[1] = noisy;

        let masks = geometric_filter(&depths, &scene.views, &cfg).unwrap();

        for a in 0..depths.len() {
            let (rows, cols) = depths[a].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let Some(d) = depths[a].get(r, c) else {
                        assert!(!masks[a][(r, c)]);
                        continue;
                    };
                    let point =
                        unproject(Vector2::new(c as f64, r as f64), d, &scene.views[a]).unwrap();
                    let mut agreeing = 1;
                    for b in 0..depths.len() {
                        if b == a {
                            continue;
                        }
                        let Some(hit) = project(&point, &scene.views[b], 0) else {
                            continue;
                        };
                        let (qr, qc) = (hit.pixel.y.round(), hit.pixel.x.round());
                        if qr < 0.0 || qc < 0.0 || qr > (rows - 1) as f64 || qc > (cols - 1) as f64
                        {
                            continue;
                        }
                        if let Some(stored) = depths[b].get(qr as usize, qc as usize) {
                            if (stored - hit.depth).abs() <= cfg.geometric_max_discrepancy {
                                agreeing += 1;
                            }
                        }
                    }
                    assert_eq!(
                        masks[a][(r, c)],
                        agreeing >= cfg.min_consistent_views,
                        "view {a} pixel ({r}, {c})"
                    );
                }
            }
        }
        // The perturbation is mixed: some pixels survive, some fail.
        let survivors: usize = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).sum();
        let total: usize = masks.iter().map(|m| m.len()).sum();
        assert!(survivors > 0 && survivors < total, "{survivors}/{total}");
    }

    #[test]
    fn geometric_filter_is_monotone_in_its_knobs() {
        let spec = SceneSpec {
            geometry: SceneGeometry::Heightfield {
                base: 620.0,
                amplitude: 30.0,
                frequency: 2.5,
            },
            num_views: 3,
            width: 32,
            height: 32,
            focal: 40.0,
            arc_step: 0.06,
            texture_frequency: 8.0,
            seed: 9,
        };
        let scene = generate_scene(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut depths = scene.gt_depths.clone();
        depths[2] = DepthMap::new(
            depths[2].raster().mapv(|d| d + 1.5 * (rng.random::<f64>() - 0.5)),
            depths[2].mask().clone(),
        )
        .unwrap();

        let survivors = |cfg: &FusionConfig| -> Vec<Array2<bool>> {
            geometric_filter(&depths, &scene.views, cfg).unwrap()
        };
        let mut cfg = fusion_config();
        cfg.geometric_max_discrepancy = 1.0;
        cfg.min_consistent_views = 2;
        let base = survivors(&cfg);

        // Fewer required views can only grow the set.
        cfg.min_consistent_views = 3;
        let stricter_views = survivors(&cfg);
        // A tighter tolerance can only shrink the set.
        cfg.min_consistent_views = 2;
        cfg.geometric_max_discrepancy = 0.25;
        let stricter_tol = survivors(&cfg);

        for (loose, strict) in base.iter().zip(&stricter_views) {
            for (l, s) in loose.iter().zip(strict.iter()) {
                assert!(*l || !*s);
            }
        }
        for (loose, strict) in base.iter().zip(&stricter_tol) {
            for (l, s) in loose.iter().zip(strict.iter()) {
                assert!(*l || !*s);
            }
        }
    }

    #[test]
    fn single_view_fusion_reproduces_the_input_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let depth = random_depth(&mut rng, 6, 8);
        let views = vec![twin_views(6, 8)[0].clone()];
        let mask = Array2::from_elem((6, 8), true);
        let mut cfg = fusion_config();
        cfg.merge_duplicates = false;
        cfg.min_consistent_views = 1;
        let cloud = fuse(&[depth.clone()], &views, &[mask], &cfg).unwrap();
        assert_eq!(cloud.len(), 48);
        assert!(cloud.support.iter().all(|&s| s == 1));
        let mut i = 0;
        for r in 0..6 {
            for c in 0..8 {
                let want = unproject(
                    Vector2::new(c as f64, r as f64),
                    depth.get(r, c).unwrap(),
                    &views[0],
                )
                .unwrap();
                assert_eq!(cloud.points[i].position, want.position);
                i += 1;
            }
        }
    }

    #[test]
    fn two_agreeing_views_fuse_to_the_midpoint_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let depth = random_depth(&mut rng, 4, 5);
        let views = twin_views(4, 5);
        let mut cfg = fusion_config();
        cfg.min_consistent_views = 2;
        let delta = 0.5 * cfg.geometric_max_discrepancy;
        let shifted = DepthMap::new(depth.raster().mapv(|d| d + delta), depth.mask().clone())
            .unwrap();
        let depths = [depth.clone(), shifted];
        let masks = geometric_filter(&depths, &views, &cfg).unwrap();
        assert!(masks.iter().all(|m| m.iter().all(|&k| k)));

        // Without merging: one point per pixel per view, fused at the
        // midpoint depth of the two samples seen from that view.
        cfg.merge_duplicates = false;
        let cloud = fuse(&depths, &views, &masks, &cfg).unwrap();
        assert_eq!(cloud.len(), 2 * 20);
        assert!(cloud.support.iter().all(|&s| s == 2));
        for r in 0..4 {
            for c in 0..5 {
                let d = depth.get(r, c).unwrap();
                let want = unproject(
                    Vector2::new(c as f64, r as f64),
                    d + delta / 2.0,
                    &views[0],
                )
                .unwrap();
                let got = &cloud.points[r * 5 + c];
                assert_relative_eq!(
                    (got.position - want.position).norm(),
                    0.0,
                    epsilon = 1e-9
                );
            }
        }

        // With merging: the two views produce the same fused point, so
        // each pixel collapses to one entry with summed support.
        cfg.merge_duplicates = true;
        cfg.merge_radius = 0.2;
        let merged = fuse(&depths, &views, &masks, &cfg).unwrap();
        assert_eq!(merged.len(), 20);
        assert!(merged.support.iter().all(|&s| s == 4));
    }

    #[test]
    fn fused_depth_stays_within_its_contributing_interval() {
        let spec = SceneSpec {
            geometry: SceneGeometry::Plane {
                depth: 600.0,
                tilt: (0.02, 0.04),
            },
            num_views: 3,
            width: 32,
            height: 32,
            focal: 40.0,
            arc_step: 0.06,
            texture_frequency: 8.0,
            seed: 13,
        };
        let scene = generate_scene(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let depths: Vec<DepthMap> = scene
            .gt_depths
            .iter()
            .map(|m| {
                DepthMap::new(
                    m.raster().mapv(|d| d + 0.4 * (rng.random::<f64>() - 0.5)),
                    m.mask().clone(),
                )
                .unwrap()
            })
            .collect();
        let mut cfg = fusion_config();
        cfg.geometric_max_discrepancy = 1.0;
        cfg.min_consistent_views = 2;
        cfg.merge_duplicates = false;
        let masks = geometric_filter(&depths, &scene.views, &cfg).unwrap();
        let cloud = fuse(&depths, &scene.views, &masks, &cfg).unwrap();

        // Rebuild each point's contributing samples independently and
        // check the fused depth sits inside their interval.
        let mut idx = 0;
        for a in 0..depths.len() {
            let (rows, cols) = depths[a].dim();
            for r in 0..rows {
                for c in 0..cols {
                    if !masks[a][(r, c)] {
                        continue;
                    }
                    let d = depths[a].get(r, c).unwrap();
                    let point =
                        unproject(Vector2::new(c as f64, r as f64), d, &scene.views[a]).unwrap();
                    let mut lo = d;
                    let mut hi = d;
                    for b in 0..depths.len() {
                        if b == a {
                            continue;
                        }
                        let Some(hit) = project(&point, &scene.views[b], 0) else {
                            continue;
                        };
                        let (qr, qc) = (hit.pixel.y.round(), hit.pixel.x.round());
                        if qr < 0.0
                            || qc < 0.0
                            || qr > (rows - 1) as f64
                            || qc > (cols - 1) as f64
                        {
                            continue;
                        }
                        let Some(stored) = depths[b].get(qr as usize, qc as usize) else {
                            continue;
                        };
                        if (stored - hit.depth).abs() <= cfg.geometric_max_discrepancy {
                            let y = unproject(
                                Vector2::new(qc, qr),
                                stored,
                                &scene.views[b],
                            )
                            .unwrap();
                            let z =
                                (scene.views[a].rotation * y.position + scene.views[a].translation)
                                    .z;
                            lo = lo.min(z);
                            hi = hi.max(z);
                        }
                    }
                    let cam = scene.views[a].rotation * cloud.points[idx].position
                        + scene.views[a].translation;
                    assert!(
                        cam.z >= lo - 1e-9 && cam.z <= hi + 1e-9,
                        "view {a} pixel ({r}, {c}): {} outside [{lo}, {hi}]",
                        cam.z
                    );
                    idx += 1;
                }
            }
        }
        assert_eq!(idx, cloud.len());
    }

    #[test]
    fn coarse_resolution_maps_fuse_through_their_pyramid_level() {
        let spec = SceneSpec {
            geometry: SceneGeometry::Plane {
                depth: 600.0,
                tilt: (0.0, 0.0),
            },
            num_views: 2,
            width: 32,
            height: 32,
            focal: 40.0,
            arc_step: 0.06,
            texture_frequency: 8.0,
            seed: 15,
        };
        let scene = generate_scene(&spec).unwrap();
        let depths: Vec<DepthMap> = scene
            .gt_depths
            .iter()
            .map(|m| m.downsample(8).unwrap())
            .collect();
        let mut cfg = fusion_config();
        cfg.min_consistent_views = 2;
        cfg.geometric_max_discrepancy = 0.5;
        cfg.merge_duplicates = false;
        let masks = geometric_filter(&depths, &scene.views, &cfg).unwrap();
        let survivors: usize = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).sum();
        assert!(survivors > 0);
        let cloud = fuse(&depths, &scene.views, &masks, &cfg).unwrap();
        assert_eq!(cloud.len(), survivors);

        // All fused points sit on (or, for the rotated source view,
        // within the nearest-pixel resampling footprint of) the plane.
        // A level-3 pixel covers 600/5 = 120mm of the plane, so the
        // rotated view's averaged samples can sit a few millimeters
        // off along its rays.
        let view0_points = masks[0].iter().filter(|&&k| k).count();
        for (i, p) in cloud.points.iter().enumerate() {
            if i < view0_points {
                // The reference looks straight at the plane: every
                // sample it averages has world z exactly 600.
                assert_relative_eq!(p.position.z, 600.0, epsilon = 1e-9);
            } else {
                assert!((p.position.z - 600.0).abs() < 4.0, "{}", p.position.z);
            }
        }
    }

    #[test]
    fn fusion_rejects_inconsistent_inputs() {
        let depth = DepthMap::constant(4, 4, 600.0).unwrap();
        let views = twin_views(4, 4);
        let cfg = fusion_config();
        // Raster that is no pyramid level of the view.
        let odd = DepthMap::constant(3, 4, 600.0).unwrap();
        assert!(geometric_filter(&[odd.clone(), depth.clone()], &views, &cfg).is_err());
        // One view only.
        assert!(geometric_filter(&[depth.clone()], &views[..1], &cfg).is_err());
        // Mask shape mismatch.
        let mask = Array2::from_elem((4, 5), true);
        assert!(fuse(&[depth.clone()], &views[..1], &[mask], &cfg).is_err());
        // Zero consistent views required.
        let mut zero = fusion_config();
        zero.min_consistent_views = 0;
        let ok_mask = Array2::from_elem((4, 4), true);
        assert!(fuse(&[depth], &views[..1], &[ok_mask], &zero).is_err());
    }

    #[test]
    fn support_counts_saturate_in_ply_export() {
        let cloud = FusedPointCloud {
            points: vec![WorldPoint::new(Vector3::new(1.0, 2.0, 3.0)).unwrap()],
            support: vec![300],
        };
        let ply = cloud.to_ply();
        assert_eq!(ply.support, vec![255]);
        assert_eq!(ply.points.len(), 1);
    }
}
