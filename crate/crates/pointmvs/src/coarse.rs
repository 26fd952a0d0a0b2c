//! Coarse depth prediction: plane sweep, variance cost volume, 3D
//! regularization, and soft-argmin regression.
//!
//! A set of fronto-parallel depth planes spans the scene's depth range.
//! For every reference pixel at 1/8 resolution and every plane, the
//! corresponding 3D point is projected into all views and the deepest
//! pyramid level is sampled; the per-view features reduce to a variance
//! cost. A small encoder–decoder of 3D convolutions regularizes the
//! volume into per-pixel depth distributions, and the expected depth
//! under that distribution (soft argmin) is the coarse prediction. The
//! per-pixel maximum probability doubles as photometric confidence.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::feature::{pyramid_on_tape, FeaturePyramid};
use crate::geometry::CameraView;
use crate::model::{BoundTape, ParamStore};

/// Pyramid level feeding the cost volume (1/8 resolution).
pub const VOLUME_LEVEL: usize = 3;

/// Ascending, uniformly spaced depth hypotheses (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlaneSet {
    depths: Vec<f64>,
}

impl DepthPlaneSet {
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn count(&self) -> usize {
        self.depths.len()
    }

    pub fn d_min(&self) -> f64 {
        self.depths[0]
    }

    pub fn d_max(&self) -> f64 {
        *self.depths.last().unwrap()
    }

    /// Distance between consecutive planes.
    pub fn spacing(&self) -> f64 {
        (self.d_max() - self.d_min()) / (self.count() - 1) as f64
    }

    /// Index of the plane closest to `depth`.
    pub fn nearest_plane(&self, depth: f64) -> usize {
        let raw = (depth - self.d_min()) / self.spacing();
        (raw.round().max(0.0) as usize).min(self.count() - 1)
    }
}

/// Sample `count` planes uniformly over `[d_min, d_max]`.
pub fn make_planes(d_min: f64, d_max: f64, count: usize) -> Result<DepthPlaneSet> {
    if !(d_min > 0.0) || !d_min.is_finite() || !d_max.is_finite() {
        return Err(Error::config(format!(
            "plane range must start above zero, got d_min = {d_min}"
        )));
    }
    if d_max <= d_min {
        return Err(Error::config(format!(
            "plane range must be increasing, got [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(Error::config(format!(
            "need at least two depth planes, got {count}"
        )));
    }
    let spacing = (d_max - d_min) / (count - 1) as f64;
    let depths = (0..count).map(|i| d_min + spacing * i as f64).collect();
    Ok(DepthPlaneSet { depths })
}

/// Variance cost over the reference frustum: `[D, H/8, W/8, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub values: Array4<f64>,
}

impl CostVolume {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("cost volume contains non-finite values"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::numerical(
                "variance cost volume has a negative channel",
            ));
        }
        Ok(Self { values })
    }
}

/// Per-pixel depth distributions: `[D, H/8, W/8]`, each pixel's D
/// values non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub values: Array3<f64>,
}

impl ProbabilityVolume {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (d, h, w) = values.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::data("empty probability volume"));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for k in 0..d {
                    let v = values[(k, y, x)];
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::numerical(format!(
                            "probability volume has invalid entry {v} at ({k}, {y}, {x})"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::numerical(format!(
                        "pixel ({y}, {x}) distribution sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self { values })
    }
}

/// Build the cost volume as a tape expression.
///
/// `taps` holds the 1/8-resolution feature map of every view (reference
/// first, each `[C, h, w]`); `Var`s so training can differentiate
/// through the warp into the extractor parameters. Returns `[D, h, w,
/// C]` over the reference raster.
pub fn volume_on_tape(
    tape: &mut Tape,
    ref_view: &CameraView,
    src_views: &[CameraView],
    taps: &[Var],
    planes: &DepthPlaneSet,
) -> Result<Var> {
    if src_views.is_empty() {
        return Err(Error::data("cost volume needs at least one source view"));
    }
    if taps.len() != src_views.len() + 1 {
        return Err(Error::data(format!(
            "expected {} feature maps (reference first), got {}",
            src_views.len() + 1,
            taps.len()
        )));
    }
    let channels = tape.value(taps[0]).shape()[0];
    for t in taps {
        let s = tape.value(*t).shape().to_vec();
        if s.len() != 3 || s[0] != channels {
            return Err(Error::data(format!(
                "feature maps must share [C, h, w] layout with C = {channels}, got {s:?}"
            )));
        }
    }
    let (w, h) = ref_view.level_size(VOLUME_LEVEL);
    let (w, h) = (w as usize, h as usize);
    let pixels = h * w;
    let d = planes.count();

    // World-space sweep points, plane-major: one row per (plane, pixel).
    let kinv = ref_view
        .level_intrinsics(VOLUME_LEVEL)
        .try_inverse()
        .expect("validated intrinsics are invertible");
    let rt = ref_view.rotation.transpose();
    let origin = ref_view.center();
    let mut pts = ArrayD::zeros(IxDyn(&[d * pixels, 3]));
    for (k, &depth) in planes.depths().iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let ray = rt * (kinv * nalgebra::Vector3::new(x as f64, y as f64, 1.0));
                let p = origin + depth * ray;
                let row = k * pixels + y * w + x;
                for j in 0..3 {
                    pts[[row, j]] = p[j];
                }
            }
        }
    }
    let pts = tape.leaf(pts);

    let views = std::iter::once(ref_view).chain(src_views);
    let mut fetched = Vec::with_capacity(taps.len());
    for (view, &tap) in views.zip(taps) {
        let k = view.level_intrinsics(VOLUME_LEVEL);
        let proj = tape.project_points(pts, &k, &view.rotation, &view.translation);
        let pix = tape.slice_axis(proj, 1, 0, 2);
        fetched.push(tape.bilinear_fetch(tap, pix));
    }
    let stacked = tape.stack(&fetched);
    let variance = tape.variance_views(stacked);
    Ok(tape.reshape(variance, &[d, h, w, channels]))
}

/// Build the variance cost volume over the reference frustum.
pub fn build_cost_volume(
    ref_view: &CameraView,
    ref_pyramid: &FeaturePyramid,
    src_views: &[CameraView],
    src_pyramids: &[FeaturePyramid],
    planes: &DepthPlaneSet,
) -> Result<CostVolume> {
    if src_views.len() != src_pyramids.len() {
        return Err(Error::data(format!(
            "got {} source views but {} pyramids",
            src_views.len(),
            src_pyramids.len()
        )));
    }
    let mut tape = Tape::new();
    let mut taps = Vec::with_capacity(src_views.len() + 1);
    for pyr in std::iter::once(ref_pyramid).chain(src_pyramids) {
        taps.push(tape.leaf(pyr.level(VOLUME_LEVEL - 1)?.clone().into_dyn()));
    }
    let volume = volume_on_tape(&mut tape, ref_view, src_views, &taps, planes)?;
    let values = tape
        .value(volume)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("volume is 4-d");
    CostVolume::new(values)
}

fn crop3d(tape: &mut Tape, x: Var, target: [usize; 3]) -> Var {
    let mut out = x;
    for (axis, &want) in target.iter().enumerate() {
        let have = tape.value(out).shape()[axis + 1];
        if have != want {
            out = tape.slice_axis(out, axis + 1, 0, want);
        }
    }
    out
}

/// Run the regularization network over a `[D, h, w, C]` cost volume
/// expression, returning per-pixel depth distributions `[D, h, w]`.
pub fn regularize_on_tape(bt: &mut BoundTape, store: &ParamStore, volume: Var) -> Result<Var> {
    let vshape = bt.tape.value(volume).shape().to_vec();
    if vshape.len() != 4 {
        return Err(Error::data(format!(
            "regularizer expects [D, h, w, C], got {vshape:?}"
        )));
    }
    let (d, h, w) = (vshape[0], vshape[1], vshape[2]);
    let x = bt.tape.permute(volume, &[3, 0, 1, 2]);

    let conv = |bt: &mut BoundTape, x: Var, name: &str, stride: usize| -> Result<Var> {
        let wvar = bt.param(store, &format!("reg.{name}.w"))?;
        let bvar = bt.param(store, &format!("reg.{name}.b"))?;
        Ok(bt.tape.conv3d(x, wvar, bvar, stride, 1))
    };

    let e0 = conv(bt, x, "enc0", 1)?;
    let e0 = bt.tape.relu(e0);
    let e1 = conv(bt, e0, "enc1", 2)?;
    let e1 = bt.tape.relu(e1);
    let e2 = conv(bt, e1, "enc2", 2)?;
    let e2 = bt.tape.relu(e2);
    let mid = conv(bt, e2, "mid", 1)?;
    let mid = bt.tape.relu(mid);

    let e1_dims = {
        let s = bt.tape.value(e1).shape().to_vec();
        [s[1], s[2], s[3]]
    };
    let up1 = bt.tape.upsample2x_3d(mid);
    let up1 = crop3d(&mut bt.tape, up1, e1_dims);
    let d1 = conv(bt, up1, "dec1", 1)?;
    let d1 = bt.tape.relu(d1);
    let d1 = bt.tape.add(d1, e1);

    let up2 = bt.tape.upsample2x_3d(d1);
    let up2 = crop3d(&mut bt.tape, up2, [d, h, w]);
    let d2 = conv(bt, up2, "dec2", 1)?;
    let d2 = bt.tape.relu(d2);
    let d2 = bt.tape.add(d2, e0);

    let logits = conv(bt, d2, "head", 1)?;
    let logits = bt.tape.reshape(logits, &[d, h, w]);
    Ok(bt.tape.softmax_axis(logits, 0))
}

/// Regularize a cost volume into per-pixel depth distributions.
pub fn regularize(store: &ParamStore, volume: &CostVolume) -> Result<ProbabilityVolume> {
    let mut bt = BoundTape::new();
    let v = bt.tape.leaf(volume.values.clone().into_dyn());
    let probs = regularize_on_tape(&mut bt, store, v)?;
    let values = bt
        .tape
        .value(probs)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("probability volume is 3-d");
    ProbabilityVolume::new(values)
}

/// Expected depth per pixel as a tape expression: probabilities `[D, h,
/// w]` against the plane depths, giving `[h, w]`.
pub fn soft_argmin_on_tape(tape: &mut Tape, probs: Var, planes: &DepthPlaneSet) -> Result<Var> {
    let s = tape.value(probs).shape().to_vec();
    if s.len() != 3 || s[0] != planes.count() {
        return Err(Error::data(format!(
            "expected [D = {}, h, w] probabilities, got {s:?}",
            planes.count()
        )));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(probs, &[d, h * w]);
    let rows = tape.permute(flat, &[1, 0]);
    let depths = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[d]), planes.depths().to_vec()).unwrap());
    let expected = tape.dot_rows(rows, depths);
    Ok(tape.reshape(expected, &[h, w]))
}

/// Regress per-pixel expected depth from a probability volume.
///
/// Rejects distributions whose per-pixel sums deviate from one by more
/// than 1e-3; every output pixel is valid and lies in the plane range.
pub fn soft_argmin(prob: &ProbabilityVolume, planes: &DepthPlaneSet) -> Result<DepthMap> {
    let (d, h, w) = prob.values.dim();
    if d != planes.count() {
        return Err(Error::data(format!(
            "probability volume has {d} planes, plane set has {}",
            planes.count()
        )));
    }
    for y in 0..h {
        for x in 0..w {
            let sum: f64 = (0..d).map(|k| prob.values[(k, y, x)]).sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::numerical(format!(
                    "unnormalized distribution at ({y}, {x}): sum {sum}"
                )));
            }
        }
    }
    let mut tape = Tape::new();
    let p = tape.leaf(prob.values.clone().into_dyn());
    let depth = soft_argmin_on_tape(&mut tape, p, planes)?;
    let values = tape
        .value(depth)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("depth map is 2-d");
    DepthMap::new(values, Array2::from_elem((h, w), true))
}

/// Per-pixel probability of the most likely plane, in `[0, 1]`.
pub fn photometric_confidence(prob: &ProbabilityVolume) -> Array2<f64> {
    let (d, h, w) = prob.values.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..d).map(|k| prob.values[(k, y, x)]).fold(0.0, f64::max)
    })
}

/// Coarse-stage outputs for one reference view.
#[derive(Debug, Clone)]
pub struct CoarsePrediction {
    pub depth: DepthMap,
    pub confidence: Array2<f64>,
    pub probability: ProbabilityVolume,
}

/// Full plain-inference coarse chain for one reference view: pyramids
/// are taken as inputs so callers can reuse them for refinement.
pub fn predict_coarse(
    store: &ParamStore,
    ref_view: &CameraView,
    ref_pyramid: &FeaturePyramid,
    src_views: &[CameraView],
    src_pyramids: &[FeaturePyramid],
    planes: &DepthPlaneSet,
) -> Result<CoarsePrediction> {
    let volume = build_cost_volume(ref_view, ref_pyramid, src_views, src_pyramids, planes)?;
    let probability = regularize(store, &volume)?;
    let depth = soft_argmin(&probability, planes)?;
    let confidence = photometric_confidence(&probability);
    Ok(CoarsePrediction {
        depth,
        confidence,
        probability,
    })
}

/// Coarse chain as one tape expression (pyramid extraction through
/// expected depth); returns the depth map `[h, w]`, the probability
/// volume `[D, h, w]`, and every view's pyramid taps for later reuse.
pub fn coarse_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    views: &[CameraView],
    images: &[Array3<f64>],
    planes: &DepthPlaneSet,
) -> Result<CoarseTapes> {
    if views.len() < 2 || views.len() != images.len() {
        return Err(Error::data(format!(
            "coarse chain needs a reference plus sources with matching images, \
             got {} views and {} images",
            views.len(),
            images.len()
        )));
    }
    let mut pyramids = Vec::with_capacity(views.len());
    for image in images {
        pyramids.push(pyramid_on_tape(bt, store, image)?);
    }
    let level3: Vec<Var> = pyramids.iter().map(|p| p[VOLUME_LEVEL - 1]).collect();
    let volume = volume_on_tape(&mut bt.tape, &views[0], &views[1..], &level3, planes)?;
    let probability = regularize_on_tape(bt, store, volume)?;
    let depth = soft_argmin_on_tape(&mut bt.tape, probability, planes)?;
    Ok(CoarseTapes {
        depth,
        probability,
        pyramids,
    })
}

/// Tape nodes produced by [`coarse_on_tape`].
pub struct CoarseTapes {
    pub depth: Var,
    pub probability: Var,
    pub pyramids: Vec<[Var; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::max_rel_err;
    use crate::config::Config;
    use crate::geometry::{centered_intrinsics, look_at, project, unproject, WorldPoint};
    use crate::model::init_params;
    use approx::assert_relative_eq;
    use nalgebra::{Vector2, Vector3};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_spacing_matches_published_ranges() {
        let train = make_planes(425.0, 921.0, 48).unwrap();
        assert_relative_eq!(train.spacing(), 496.0 / 47.0, epsilon = 1e-12);
        assert!((train.spacing() - 10.55).abs() < 0.01);
        assert_eq!(train.d_min(), 425.0);
        assert_eq!(train.d_max(), 921.0);
        assert_eq!(train.count(), 48);

        let eval = make_planes(425.0, 921.0, 96).unwrap();
        assert_relative_eq!(eval.spacing(), 496.0 / 95.0, epsilon = 1e-12);
        assert!((eval.spacing() - 5.22).abs() < 0.01);

        let tiny = make_planes(1e-9, 1.0, 2).unwrap();
        assert_eq!(tiny.depths(), &[1e-9, 1.0]);

        assert!(make_planes(0.0, 1.0, 2).is_err());
        assert!(make_planes(2.0, 1.0, 8).is_err());
        assert!(make_planes(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn nearest_plane_rounds_and_clamps() {
        let planes = make_planes(100.0, 200.0, 11).unwrap(); // spacing 10
        assert_eq!(planes.nearest_plane(100.0), 0);
        assert_eq!(planes.nearest_plane(104.9), 0);
        assert_eq!(planes.nearest_plane(105.1), 1);
        assert_eq!(planes.nearest_plane(500.0), 10);
        assert_eq!(planes.nearest_plane(-3.0), 0);
    }

    #[test]
    fn eighth_resolution_volume_is_a_twentieth_of_quarter_resolution() {
        // 48 planes at 1/8 resolution versus 256 planes at 1/4.
        let ours: f64 = 48.0 / 64.0;
        let baseline: f64 = 256.0 / 16.0;
        let ratio: f64 = ours / baseline;
        assert!((ratio - 0.05).abs() / 0.05 < 0.10, "ratio {ratio}");
    }

    fn ring_views(n: usize, size: (u32, u32), focal: f64, radius: f64) -> Vec<CameraView> {
        let target = Vector3::new(0.0, 0.0, 600.0);
        (0..n)
            .map(|i| {
                let angle = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.25;
                look_at(
                    centered_intrinsics(focal, size),
                    Vector3::new(radius * angle.sin(), 0.0, 600.0 - radius * angle.cos()),
                    target,
                    size,
                )
                .unwrap()
            })
            .collect()
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeaturePyramid {
        FeaturePyramid::new([
            ndarray::Array3::from_shape_fn((c, h * 4, w * 4), |_| rng.random::<f64>()),
            ndarray::Array3::from_shape_fn((c, h * 2, w * 2), |_| rng.random::<f64>()),
            ndarray::Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>()),
        ])
        .unwrap()
    }

    #[test]
    fn duplicated_reference_view_gives_zero_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let views = ring_views(1, (64, 64), 80.0, 600.0);
        let pyr = random_pyramid(&mut rng, 5, 8, 8);
        let planes = make_planes(425.0, 921.0, 6).unwrap();
        let volume = build_cost_volume(
            &views[0],
            &pyr,
            &[views[0].clone()],
            &[pyr.clone()],
            &planes,
        )
        .unwrap();
        assert_eq!(volume.values.dim(), (6, 8, 8, 5));
        assert!(volume.values.iter().all(|&v| v.abs() < 1e-20));
    }

    /// Pyramid whose 1/8-level feature at each pixel is a smooth
    /// function of where that pixel's ray hits the z = `plane_z` plane,
    /// mimicking a perfectly photoconsistent textured wall.
    fn plane_scene_pyramid(view: &CameraView, plane_z: f64, c: usize) -> FeaturePyramid {
        let (w, h) = view.level_size(VOLUME_LEVEL);
        let feature = |xw: f64, yw: f64, ch: usize| match ch {
            0 => xw / 50.0,
            1 => yw / 50.0,
            _ => (xw + 2.0 * yw) / 100.0,
        };
        let level3 = ndarray::Array3::from_shape_fn((c, h as usize, w as usize), |(ch, y, x)| {
            let pix = Vector2::new(x as f64 * 8.0, y as f64 * 8.0);
            let ray = view.pixel_ray(pix);
            let origin = view.center();
            // Intersect the ray with the world plane z = plane_z.
            let s = (plane_z - origin.z) / ray.z;
            let hit = origin + s * ray;
            feature(hit.x, hit.y, ch)
        });
        FeaturePyramid::new([
            ndarray::Array3::zeros((c, h as usize * 4, w as usize * 4)),
            ndarray::Array3::zeros((c, h as usize * 2, w as usize * 2)),
            level3,
        ])
        .unwrap()
    }

    #[test]
    fn textured_plane_minimizes_cost_at_nearest_plane() {
        let plane_z = 612.0;
        let views = ring_views(3, (64, 64), 160.0, 600.0);
        let pyramids: Vec<FeaturePyramid> = views
            .iter()
            .map(|v| plane_scene_pyramid(v, plane_z, 3))
            .collect();
        let planes = make_planes(450.0, 810.0, 10).unwrap(); // spacing 40
        let volume = build_cost_volume(
            &views[0],
            &pyramids[0],
            &views[1..],
            &pyramids[1..],
            &planes,
        )
        .unwrap();
        let expected = planes.nearest_plane(plane_z);
        let (d, h, w, c) = volume.values.dim();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let cost =
                    |k: usize| (0..c).map(|ch| volume.values[(k, y, x, ch)]).sum::<f64>();
                let best = (0..d)
                    .min_by(|&a, &b| cost(a).partial_cmp(&cost(b)).unwrap())
                    .unwrap();
                assert_eq!(best, expected, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn volume_is_invariant_to_source_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let views = ring_views(4, (64, 64), 80.0, 600.0);
        let pyramids: Vec<FeaturePyramid> =
            (0..4).map(|_| random_pyramid(&mut rng, 4, 8, 8)).collect();
        let planes = make_planes(425.0, 921.0, 4).unwrap();
        let base = build_cost_volume(
            &views[0],
            &pyramids[0],
            &views[1..],
            &pyramids[1..],
            &planes,
        )
        .unwrap();
        let shuffled_views = vec![views[3].clone(), views[1].clone(), views[2].clone()];
        let shuffled_pyrs = vec![pyramids[3].clone(), pyramids[1].clone(), pyramids[2].clone()];
        let shuffled = build_cost_volume(
            &views[0],
            &pyramids[0],
            &shuffled_views,
            &shuffled_pyrs,
            &planes,
        )
        .unwrap();
        for (a, b) in base.values.iter().zip(shuffled.values.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    fn tiny_store() -> ParamStore {
        let mut cfg = Config::default();
        cfg.model.feature_channels = [4, 6, 8];
        cfg.model.regularizer_channels = [4, 6, 8];
        init_params(&cfg, 21)
    }

    #[test]
    fn regularizer_outputs_normalized_deterministic_distributions() {
        let store = tiny_store();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Odd plane count and raster dims exercise the crop path.
        let values = Array4::from_shape_fn((5, 5, 7, 8), |_| rng.random::<f64>());
        let volume = CostVolume::new(values).unwrap();
        let probs = regularize(&store, &volume).unwrap();
        assert_eq!(probs.values.dim(), (5, 5, 7));
        for y in 0..5 {
            for x in 0..7 {
                let sum: f64 = (0..5).map(|k| probs.values[(k, y, x)]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let again = regularize(&store, &volume).unwrap();
        assert_eq!(probs, again);
    }

    #[test]
    fn negative_or_nonfinite_volumes_are_rejected() {
        let mut values = Array4::zeros((2, 2, 2, 2));
        values[(0, 0, 0, 0)] = -0.5;
        assert!(CostVolume::new(values).is_err());
        let mut values = Array4::zeros((2, 2, 2, 2));
        values[(1, 1, 1, 1)] = f64::NAN;
        assert!(CostVolume::new(values).is_err());
    }

    #[test]
    fn soft_argmin_one_hot_uniform_and_oracle() {
        let planes = make_planes(425.0, 921.0, 8).unwrap();
        let mut one_hot = Array3::zeros((8, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                one_hot[(3, y, x)] = 1.0;
            }
        }
        let depth = soft_argmin(&ProbabilityVolume::new(one_hot).unwrap(), &planes).unwrap();
        for &v in depth.raster().iter() {
            assert_relative_eq!(v, planes.depths()[3], epsilon = 1e-12);
        }

        let uniform = Array3::from_elem((8, 3, 3), 1.0 / 8.0);
        let depth = soft_argmin(&ProbabilityVolume::new(uniform).unwrap(), &planes).unwrap();
        for &v in depth.raster().iter() {
            assert_relative_eq!(v, (425.0 + 921.0) / 2.0, epsilon = 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut random = Array3::from_shape_fn((8, 4, 4), |_| rng.random::<f64>() + 0.01);
        for y in 0..4 {
            for x in 0..4 {
                let sum: f64 = (0..8).map(|k| random[(k, y, x)]).sum();
                for k in 0..8 {
                    random[(k, y, x)] /= sum;
                }
            }
        }
        let prob = ProbabilityVolume::new(random.clone()).unwrap();
        let depth = soft_argmin(&prob, &planes).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let oracle: f64 = (0..8)
                    .map(|k| random[(k, y, x)] * planes.depths()[k])
                    .sum();
                assert!((depth.get(y, x).unwrap() - oracle).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn soft_argmin_rejects_unnormalized_input() {
        let planes = make_planes(425.0, 921.0, 4).unwrap();
        let bad = ProbabilityVolume {
            values: Array3::from_elem((4, 2, 2), 0.3), // sums to 1.2
        };
        let err = soft_argmin(&bad, &planes).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        // Mismatched plane count is caught too.
        let ok = ProbabilityVolume {
            values: Array3::from_elem((5, 2, 2), 0.2),
        };
        assert!(soft_argmin(&ok, &planes).is_err());
    }

    #[test]
    fn confidence_is_the_max_probability() {
        let planes = make_planes(425.0, 921.0, 48).unwrap();
        let mut one_hot = Array3::zeros((48, 1, 1));
        one_hot[(5, 0, 0)] = 1.0;
        let c = photometric_confidence(&ProbabilityVolume::new(one_hot).unwrap());
        assert_eq!(c[(0, 0)], 1.0);

        let uniform = ProbabilityVolume::new(Array3::from_elem((48, 2, 2), 1.0 / 48.0)).unwrap();
        let c = photometric_confidence(&uniform);
        for &v in c.iter() {
            assert_relative_eq!(v, 1.0 / 48.0, epsilon = 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut random = Array3::from_shape_fn((6, 3, 3), |_| rng.random::<f64>() + 0.01);
        for y in 0..3 {
            for x in 0..3 {
                let sum: f64 = (0..6).map(|k| random[(k, y, x)]).sum();
                for k in 0..6 {
                    random[(k, y, x)] /= sum;
                }
            }
        }
        let prob = ProbabilityVolume::new(random.clone()).unwrap();
        let c = photometric_confidence(&prob);
        for y in 0..3 {
            for x in 0..3 {
                let oracle = (0..6).map(|k| random[(k, y, x)]).fold(0.0, f64::max);
                assert_eq!(c[(y, x)], oracle);
                assert!(planes.count() > 0);
            }
        }
    }

    #[test]
    fn sweep_points_project_back_to_their_pixel() {
        // The volume's sweep geometry must agree with project/unproject.
        let views = ring_views(2, (64, 64), 80.0, 600.0);
        let view = &views[0];
        let planes = make_planes(425.0, 921.0, 3).unwrap();
        for &depth in planes.depths() {
            let pix_l3 = Vector2::new(3.0, 5.0);
            let full = pix_l3 * 8.0;
            let p = unproject(full, depth, view).unwrap();
            let back = project(&p, view, VOLUME_LEVEL).unwrap();
            assert_relative_eq!(back.pixel.x, pix_l3.x, epsilon = 1e-9);
            assert_relative_eq!(back.pixel.y, pix_l3.y, epsilon = 1e-9);
            assert_relative_eq!(back.depth, depth, epsilon = 1e-9);
        }
        let _ = WorldPoint::from_xyz(0.0, 0.0, 0.0);
    }

    #[test]
    fn full_coarse_chain_gradients_match_finite_differences() {
        // Smallest raster the pyramid accepts whose 1/8 level is 4x4.
        let mut cfg = Config::default();
        cfg.model.feature_channels = [2, 3, 4];
        cfg.model.regularizer_channels = [2, 3, 4];
        let mut store = init_params(&cfg, 33);
        // Jitter every tensor so the check runs at a generic point:
        // with zero biases, clipped receptive fields at the padded
        // border yield preactivations of exactly zero, where a central
        // difference straddles the rectifier kink at any step size.
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(99);
        for name in store.names().cloned().collect::<Vec<_>>() {
            for v in store.get_mut(&name).unwrap().iter_mut() {
                *v += 0.05 * (jitter_rng.random::<f64>() - 0.5);
            }
        }
        let store = store;
        let views = ring_views(2, (32, 32), 40.0, 600.0);
        let planes = make_planes(425.0, 921.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let images: Vec<ndarray::Array3<f64>> = (0..2)
            .map(|_| ndarray::Array3::from_shape_fn((32, 32, 3), |_| rng.random::<f64>()))
            .collect();

        let run = |store: &ParamStore| -> f64 {
            let mut bt = BoundTape::new();
            let out = coarse_on_tape(&mut bt, store, &views, &images, &planes).unwrap();
            let root = bt.tape.sum_all(out.depth);
            bt.tape.scalar(root)
        };

        let mut bt = BoundTape::new();
        let out = coarse_on_tape(&mut bt, &store, &views, &images, &planes).unwrap();
        assert_eq!(bt.tape.value(out.depth).shape(), &[4, 4]);
        assert_eq!(bt.tape.value(out.probability).shape(), &[4, 4, 4]);
        let root = bt.tape.sum_all(out.depth);
        let grads = bt.tape.backward(root);

        // Probe a few coordinates in every parameter family.
        let probes = [
            ("feat.s1.down.w", 5),
            ("feat.s3.out.w", 17),
            ("feat.s2.down.b", 1),
            ("reg.enc0.w", 40),
            ("reg.dec2.w", 11),
            ("reg.head.b", 0),
        ];
        let h = 1e-5;
        for (name, flat_index) in probes {
            let var = bt.bound().find(|(n, _)| *n == name).unwrap().1;
            let got = grads.wrt(*var).expect("parameter influences the loss");
            let analytic = got.as_slice().unwrap()[flat_index];

            let mut plus = store.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat_index] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat_index] -= h;
            let numeric = (run(&plus) - run(&minus)) / (2.0 * h);

            let rel = max_rel_err(
                &ndarray::arr0(analytic).into_dyn(),
                &ndarray::arr0(numeric).into_dyn(),
            );
            assert!(
                rel < 1e-3,
                "{name}[{flat_index}]: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn soft_argmin_stays_within_plane_range(
            seed in 0u64..500,
            d in 2usize..10,
        ) {
            let planes = make_planes(425.0, 921.0, d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut values = Array3::from_shape_fn((d, 2, 2), |_| rng.random::<f64>() + 1e-6);
            for y in 0..2 {
                for x in 0..2 {
                    let sum: f64 = (0..d).map(|k| values[(k, y, x)]).sum();
                    for k in 0..d {
                        values[(k, y, x)] /= sum;
                    }
                }
            }
            let depth = soft_argmin(&ProbabilityVolume::new(values).unwrap(), &planes).unwrap();
            for &v in depth.raster().iter() {
                prop_assert!(v >= planes.d_min() - 1e-9);
                prop_assert!(v <= planes.d_max() + 1e-9);
            }
        }
    }
}
