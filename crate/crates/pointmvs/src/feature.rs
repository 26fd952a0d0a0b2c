//! Image feature pyramid and multi-view variance features.
//!
//! Each input image is encoded once into a three-level feature pyramid
//! at 1/2, 1/4, and 1/8 resolution by a small stride-2 convolutional
//! trunk with a linear output tap per level. Matching evidence for a
//! 3D point is gathered by projecting it into every view, bilinearly
//! sampling that view's feature map, and reducing the per-view vectors
//! with a population-variance metric: identical features across views
//! (a photoconsistent point) give zero variance, mismatches grow it.
//!
//! The functions here are the plain (value-level) surface; the
//! differentiable pipeline builds the same computations as tape
//! expressions via [`pyramid_on_tape`] and the ops in
//! [`crate::autodiff`], so both paths share one implementation of the
//! arithmetic.

use nalgebra::Vector3;
use ndarray::{Array3, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraView, WorldPoint};
use crate::model::{BoundTape, ParamStore};

/// Number of pyramid levels; level index 0 is 1/2 resolution, 2 is
/// 1/8.
pub const PYRAMID_LEVELS: usize = 3;

/// Downsampling factor from the full-resolution image to pyramid
/// level `i` (0-based): 2, 4, 8.
pub fn level_factor(level: usize) -> usize {
    2 << level
}

/// Three-scale feature maps of one image, each `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: [Array3<f64>; PYRAMID_LEVELS],
}

impl FeaturePyramid {
    pub fn new(levels: [Array3<f64>; PYRAMID_LEVELS]) -> Result<Self> {
        for (i, l) in levels.iter().enumerate() {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "pyramid level {i} contains non-finite values"
                )));
            }
        }
        for i in 1..PYRAMID_LEVELS {
            let (_, ph, pw) = levels[i - 1].dim();
            let (_, h, w) = levels[i].dim();
            if h != ph.div_ceil(2) || w != pw.div_ceil(2) {
                return Err(Error::data(format!(
                    "pyramid level {i} is {h}x{w}, expected half of {ph}x{pw}"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, level: usize) -> Result<&Array3<f64>> {
        self.levels.get(level).ok_or_else(|| {
            Error::data(format!(
                "pyramid level {level} out of range (have {PYRAMID_LEVELS})"
            ))
        })
    }

    /// Channel count of a level.
    pub fn channels(&self, level: usize) -> Result<usize> {
        Ok(self.level(level)?.dim().0)
    }
}

/// Per-point multi-view variance feature at one pyramid level.
///
/// `num_views` is the number of views that actually saw the point;
/// zero marks the point invisible everywhere, with zero-filled values
/// for downstream masking.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFeature {
    pub values: Vec<f64>,
    pub num_views: usize,
}

impl VarianceFeature {
    /// Whether at least one view contributed.
    pub fn is_valid(&self) -> bool {
        self.num_views > 0
    }

    /// Zero-filled invisible-point marker.
    pub fn invalid(channels: usize) -> Self {
        Self {
            values: vec![0.0; channels],
            num_views: 0,
        }
    }
}

/// Axis-aligned world-space box used to normalize point coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl SceneBounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        for i in 0..3 {
            if !(max[i] > min[i]) {
                return Err(Error::config(format!(
                    "degenerate scene bounds on axis {i}: [{}, {}]",
                    min[i], max[i]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Tight box around a set of points, expanded by `margin` on every
    /// side.
    pub fn around(points: impl IntoIterator<Item = Vector3<f64>>, margin: f64) -> Result<Self> {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        if !min.iter().all(|v| v.is_finite()) {
            return Err(Error::data("cannot bound an empty point set"));
        }
        Self::new(min.map(|v| v - margin), max.map(|v| v + margin))
    }

    /// Map a world point into `[-1, 1]^3` (affine per axis).
    pub fn normalize(&self, p: Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| 2.0 * (p[i] - self.min[i]) / (self.max[i] - self.min[i]) - 1.0)
    }

    /// Per-axis scale and offset of [`Self::normalize`], for applying
    /// the same map to point batches on the tape.
    pub fn affine(&self) -> ([f64; 3], [f64; 3]) {
        let mut scale = [0.0; 3];
        let mut offset = [0.0; 3];
        for i in 0..3 {
            scale[i] = 2.0 / (self.max[i] - self.min[i]);
            offset[i] = -2.0 * self.min[i] / (self.max[i] - self.min[i]) - 1.0;
        }
        (scale, offset)
    }
}

/// A refinement-network input: the variance feature concatenated with
/// normalized point coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPoint {
    pub feature: Vec<f64>,
    pub normalized_coords: Vector3<f64>,
    pub world_point: WorldPoint,
}

/// Build the pyramid as tape expressions; returns one node per level
/// (`[C, H, W]` each). Shared by training (gradients flow to the
/// convolution parameters) and plain extraction.
pub fn pyramid_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    image: &Array3<f64>,
) -> Result<[Var; PYRAMID_LEVELS]> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::data(format!("image must be [H, W, 3], got {c} channels")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::data(format!(
            "image dimensions must be divisible by 8 for the 1/8-resolution level; \
             got {h}x{w} — pad to {}x{}",
            h.div_ceil(8) * 8,
            w.div_ceil(8) * 8
        )));
    }
    let chw = ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| image[(ix[1], ix[2], ix[0])]);
    let x = bt.tape.leaf(chw);
    let mut trunk = x;
    let mut taps = Vec::with_capacity(PYRAMID_LEVELS);
    for stage in 1..=PYRAMID_LEVELS {
        let dw = bt.param(store, &format!("feat.s{stage}.down.w"))?;
        let db = bt.param(store, &format!("feat.s{stage}.down.b"))?;
        let pre = bt.tape.conv2d(trunk, dw, db, 2, 1);
        trunk = bt.tape.relu(pre);
        let ow = bt.param(store, &format!("feat.s{stage}.out.w"))?;
        let ob = bt.param(store, &format!("feat.s{stage}.out.b"))?;
        taps.push(bt.tape.conv2d(trunk, ow, ob, 1, 1));
    }
    Ok([taps[0], taps[1], taps[2]])
}

/// Encode an image into its three-level feature pyramid.
pub fn extract_pyramid(store: &ParamStore, image: &Array3<f64>) -> Result<FeaturePyramid> {
    let mut bt = BoundTape::new();
    let taps = pyramid_on_tape(&mut bt, store, image)?;
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    for tap in taps {
        let v = bt.tape.value(tap);
        levels.push(
            v.clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("conv output is 3-d"),
        );
    }
    FeaturePyramid::new([levels[0].clone(), levels[1].clone(), levels[2].clone()])
}

/// Bilinearly sample one pyramid level at a continuous pixel position
/// (in that level's coordinate frame). Out-of-range positions clamp to
/// the edge; visibility policy is the caller's concern.
pub fn fetch_feature(
    pyramid: &FeaturePyramid,
    level: usize,
    pixel: nalgebra::Vector2<f64>,
) -> Result<Vec<f64>> {
    let map = pyramid.level(level)?;
    let mut tape = Tape::new();
    let m = tape.leaf(map.clone().into_dyn());
    let p = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![pixel.x, pixel.y]).unwrap());
    let out = tape.bilinear_fetch(m, p);
    Ok(tape.value(out).iter().cloned().collect())
}

/// Per-channel population variance over N same-length view features.
pub fn variance_cost(features: &[Vec<f64>]) -> Result<VarianceFeature> {
    let n = features.len();
    if n == 0 {
        return Err(Error::data("variance over an empty view set"));
    }
    let len = features[0].len();
    if features.iter().any(|f| f.len() != len) {
        return Err(Error::data("view feature lengths differ"));
    }
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(n);
    for f in features {
        rows.push(tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, len]), f.clone()).unwrap()));
    }
    let stacked = tape.stack(&rows);
    let var = tape.variance_views(stacked);
    Ok(VarianceFeature {
        values: tape.value(var).iter().cloned().collect(),
        num_views: n,
    })
}

/// Concatenate a variance feature with the point's normalized
/// coordinates.
pub fn augment_point(
    variance: &VarianceFeature,
    world_point: WorldPoint,
    bounds: &SceneBounds,
) -> AugmentedPoint {
    let normalized = bounds.normalize(world_point.position);
    let mut feature = variance.values.clone();
    feature.extend_from_slice(normalized.as_slice());
    AugmentedPoint {
        feature,
        normalized_coords: normalized,
        world_point,
    }
}

/// Whether a full-resolution projection lands inside the raster.
pub fn visible_in(view: &CameraView, pixel: nalgebra::Vector2<f64>) -> bool {
    let (w, h) = view.image_size;
    pixel.x >= 0.0 && pixel.x <= (w - 1) as f64 && pixel.y >= 0.0 && pixel.y <= (h - 1) as f64
}

/// Project a point into every view, fetch the given pyramid level
/// where visible, and reduce with the variance metric. Views where the
/// point is behind the camera or projects outside the image are
/// excluded (N adjusts); a point invisible everywhere yields the
/// zero-filled invalid feature.
pub fn fetch_multiview_variance(
    point: WorldPoint,
    views: &[CameraView],
    pyramids: &[FeaturePyramid],
    level: usize,
) -> Result<VarianceFeature> {
    if views.is_empty() || views.len() != pyramids.len() {
        return Err(Error::data(format!(
            "need matching non-empty views and pyramids, got {} and {}",
            views.len(),
            pyramids.len()
        )));
    }
    let channels = pyramids[0].channels(level)?;
    let mut per_view = Vec::new();
    for (view, pyramid) in views.iter().zip(pyramids) {
        let Some(hit) = project(&point, view, 0) else {
            continue;
        };
        if !visible_in(view, hit.pixel) {
            continue;
        }
        let level_pixel = hit.pixel / level_factor(level) as f64;
        per_view.push(fetch_feature(pyramid, level, level_pixel)?);
    }
    if per_view.is_empty() {
        return Ok(VarianceFeature::invalid(channels));
    }
    variance_cost(&per_view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geometry::{centered_intrinsics, look_at};
    use crate::model::init_params;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_store() -> ParamStore {
        let mut cfg = Config::default();
        cfg.model.feature_channels = [4, 8, 16];
        init_params(&cfg, 11)
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn pyramid_levels_are_half_quarter_eighth() {
        let store = small_store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = random_image(&mut rng, 64, 64);
        let pyr = extract_pyramid(&store, &image).unwrap();
        assert_eq!(pyr.level(0).unwrap().dim(), (4, 32, 32));
        assert_eq!(pyr.level(1).unwrap().dim(), (8, 16, 16));
        assert_eq!(pyr.level(2).unwrap().dim(), (16, 8, 8));
    }

    #[test]
    fn indivisible_dimensions_report_required_padding() {
        let store = small_store();
        let image = Array3::zeros((60, 64, 3));
        let err = extract_pyramid(&store, &image).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("64x64"), "{err}");
    }

    #[test]
    fn constant_image_gives_constant_interior_features() {
        // Away from the zero-padding border the convolution stack sees
        // identical neighborhoods, so features must be spatially
        // constant there. Interior margins follow from the receptive
        // field: level-1 pixels need input rows 2i-3..2i+3, level-3
        // pixels rows 8i-15..8i+15.
        let store = small_store();
        let image = Array3::from_elem((64, 64, 3), 0.37);
        let pyr = extract_pyramid(&store, &image).unwrap();
        let f1 = pyr.level(0).unwrap();
        for c in 0..4 {
            let reference = f1[(c, 16, 16)];
            for y in 2..31 {
                for x in 2..31 {
                    assert_relative_eq!(f1[(c, y, x)], reference, max_relative = 1e-12);
                }
            }
        }
        let f3 = pyr.level(2).unwrap();
        for c in 0..16 {
            let reference = f3[(c, 4, 4)];
            for y in 2..7 {
                for x in 2..7 {
                    assert_relative_eq!(f3[(c, y, x)], reference, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_images_give_bit_equal_pyramids() {
        let store = small_store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_image(&mut rng, 32, 48);
        let a = extract_pyramid(&store, &image).unwrap();
        let b = extract_pyramid(&store, &image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fetch_on_grid_node_and_midpoint() {
        let mut level1 = Array3::zeros((2, 4, 4));
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    level1[(c, y, x)] = (c * 100 + y * 10 + x) as f64;
                }
            }
        }
        let pyr = FeaturePyramid::new([
            level1.clone(),
            Array3::zeros((2, 2, 2)),
            Array3::zeros((2, 1, 1)),
        ])
        .unwrap();
        let node = fetch_feature(&pyr, 0, Vector2::new(2.0, 1.0)).unwrap();
        assert_eq!(node, vec![12.0, 112.0]);
        let mid = fetch_feature(&pyr, 0, Vector2::new(2.5, 1.0)).unwrap();
        assert_eq!(mid, vec![12.5, 112.5]);
        assert!(fetch_feature(&pyr, 7, Vector2::zeros()).is_err());
    }

    #[test]
    fn variance_matches_hand_values_and_two_pass_oracle() {
        let zero = variance_cost(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(zero.values, vec![0.0, 0.0]);
        assert_eq!(zero.num_views, 3);

        let two = variance_cost(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(two.values, vec![1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let views: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let got = variance_cost(&views).unwrap();
        for ch in 0..7 {
            let mean: f64 = views.iter().map(|v| v[ch]).sum::<f64>() / 5.0;
            let var: f64 = views.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((got.values[ch] - var).abs() < 1e-7);
        }
        assert!(variance_cost(&[]).is_err());
        assert!(variance_cost(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn augment_normalizes_against_bounds() {
        let bounds = SceneBounds::new(
            Vector3::new(-10.0, -20.0, 400.0),
            Vector3::new(10.0, 20.0, 800.0),
        )
        .unwrap();
        let variance = VarianceFeature {
            values: vec![0.5; 32],
            num_views: 3,
        };
        let center = augment_point(
            &variance,
            WorldPoint::from_xyz(0.0, 0.0, 600.0),
            &bounds,
        );
        assert_relative_eq!(center.normalized_coords.norm(), 0.0, epsilon = 1e-12);
        assert_eq!(center.feature.len(), 35);
        let corner = augment_point(
            &variance,
            WorldPoint::from_xyz(10.0, 20.0, 800.0),
            &bounds,
        );
        assert_eq!(corner.normalized_coords, Vector3::new(1.0, 1.0, 1.0));
        assert!(SceneBounds::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn bounds_affine_matches_normalize() {
        let bounds = SceneBounds::new(
            Vector3::new(-3.0, 1.0, 400.0),
            Vector3::new(5.0, 9.0, 900.0),
        )
        .unwrap();
        let (scale, offset) = bounds.affine();
        let p = Vector3::new(1.7, 4.2, 555.0);
        let n = bounds.normalize(p);
        for i in 0..3 {
            assert_relative_eq!(n[i], p[i] * scale[i] + offset[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn multiview_variance_composition() {
        // Three cameras looking at a textured region; the composed op
        // must equal manual per-view project + fetch + variance.
        let store = small_store();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let size = (64u32, 64u32);
        let intr = centered_intrinsics(80.0, size);
        let views: Vec<CameraView> = (0..3)
            .map(|i| {
                let angle = (i as f64 - 1.0) * 0.1;
                look_at(
                    intr,
                    Vector3::new(500.0 * angle.sin(), 0.0, 500.0 - 500.0 * angle.cos()),
                    Vector3::new(0.0, 0.0, 500.0),
                    size,
                )
                .unwrap()
            })
            .collect();
        let pyramids: Vec<FeaturePyramid> = (0..3)
            .map(|_| extract_pyramid(&store, &random_image(&mut rng, 64, 64)).unwrap())
            .collect();
        let point = WorldPoint::from_xyz(5.0, -8.0, 500.0);
        for level in 0..PYRAMID_LEVELS {
            let composed =
                fetch_multiview_variance(point, &views, &pyramids, level).unwrap();
            let mut manual = Vec::new();
            for (view, pyr) in views.iter().zip(&pyramids) {
                let hit = project(&point, view, 0).unwrap();
                assert!(visible_in(view, hit.pixel));
                manual.push(
                    fetch_feature(pyr, level, hit.pixel / level_factor(level) as f64).unwrap(),
                );
            }
            let expected = variance_cost(&manual).unwrap();
            assert_eq!(composed.num_views, 3);
            for (a, b) in composed.values.iter().zip(&expected.values) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invisible_point_yields_flagged_zero_feature() {
        let store = small_store();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let size = (64u32, 64u32);
        let view = look_at(
            centered_intrinsics(80.0, size),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            size,
        )
        .unwrap();
        let pyramid = extract_pyramid(&store, &random_image(&mut rng, 64, 64)).unwrap();
        let behind = WorldPoint::from_xyz(0.0, 0.0, -100.0);
        let got =
            fetch_multiview_variance(behind, &[view.clone()], &[pyramid.clone()], 2).unwrap();
        assert!(!got.is_valid());
        assert_eq!(got.values, vec![0.0; 16]);
        // A single visible view has zero variance but is valid.
        let front = WorldPoint::from_xyz(0.0, 0.0, 500.0);
        let got = fetch_multiview_variance(front, &[view], &[pyramid], 2).unwrap();
        assert!(got.is_valid());
        assert_eq!(got.num_views, 1);
        assert!(got.values.iter().all(|&v| v.abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn variance_is_permutation_invariant(
            seed in 0u64..1000,
            n in 2usize..6,
            channels in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let views: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..channels).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect())
                .collect();
            let base = variance_cost(&views).unwrap();
            let mut reversed = views.clone();
            reversed.reverse();
            let rev = variance_cost(&reversed).unwrap();
            for (a, b) in base.values.iter().zip(&rev.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mut rotated = views.clone();
            rotated.rotate_left(1);
            let rot = variance_cost(&rotated).unwrap();
            for (a, b) in base.values.iter().zip(&rot.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn variance_zero_iff_all_views_equal(
            seed in 0u64..1000,
            n in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shared: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let equal: Vec<Vec<f64>> = (0..n).map(|_| shared.clone()).collect();
            let v = variance_cost(&equal).unwrap();
            prop_assert!(v.values.iter().all(|&x| x.abs() < 1e-9));

            let mut unequal = equal.clone();
            unequal[0][0] += 1.0;
            let v = variance_cost(&unequal).unwrap();
            prop_assert!(v.values[0] > 1e-9);
        }

        #[test]
        fn normalization_is_an_affine_bijection(
            x in -50.0f64..50.0,
            y in -50.0f64..50.0,
            z in 400.0f64..900.0,
        ) {
            let bounds = SceneBounds::new(
                Vector3::new(-50.0, -50.0, 400.0),
                Vector3::new(50.0, 50.0, 900.0),
            ).unwrap();
            let p = Vector3::new(x, y, z);
            let n = bounds.normalize(p);
            prop_assert!((-1.0..=1.0).contains(&n.x));
            prop_assert!((-1.0..=1.0).contains(&n.y));
            prop_assert!((-1.0..=1.0).contains(&n.z));
            // Invert and compare.
            let back = Vector3::from_fn(|i, _| {
                bounds.min[i] + (n[i] + 1.0) / 2.0 * (bounds.max[i] - bounds.min[i])
            });
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
