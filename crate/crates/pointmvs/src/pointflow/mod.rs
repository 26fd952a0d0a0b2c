//! Point-based iterative depth refinement.
//!
//! The coarse depth map is lifted to a point cloud; every point spawns
//! 2m+1 hypotheses spaced `s` millimeters apart along the reference
//! camera's viewing direction. A graph network scores each hypothesis
//! from multi-view feature variance fetched at its 3D position, and the
//! probability-weighted signed offset becomes a depth residual. The
//! driver repeats this with shrinking step sizes, upsampling the map
//! between iterations, optionally restricted to a region of interest.
//!
//! Two execution paths share the same arithmetic: [`refine_iteratively`]
//! evaluates with short-lived tapes and a chunked network forward so
//! memory stays bounded on large maps, while [`refine_chain_on_tape`]
//! keeps the whole chain on one tape so training can differentiate
//! through every iteration. Their outputs match bit for bit.

use nalgebra::{Vector2, Vector3};
use ndarray::{Array1, Array2};

use crate::autodiff::{Tape, Var, PROJECT_MIN_DEPTH};
use crate::config::Config;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::feature::{level_factor, FeaturePyramid, SceneBounds, PYRAMID_LEVELS};
use crate::geometry::{camera_direction, CameraView, WorldPoint};
use crate::model::{BoundTape, ParamStore};

mod knn;
mod network;

pub use knn::{build_knn_graph, KnnGraph};
pub use network::{
    edge_conv, edge_conv_ablated, edge_conv_on_tape, expected_displacement,
    expected_displacement_on_tape, hypothesis_offsets, predict_flow, predict_flow_on_tape,
    EDGE_CONV_LAYERS,
};

/// Extra margin (mm) added to the normalization bounds beyond the
/// maximum hypothesis excursion `m * s`, so hypotheses of points on the
/// bounding box still normalize strictly inside [-1, 1]^3.
const BOUNDS_EXTRA_MARGIN_MM: f64 = 1.0;

/// Signed world-space offset of hypothesis `k` relative to its base
/// point. Shared by every builder so positions agree bit for bit.
fn hypothesis_offset(direction: Vector3<f64>, step: f64, k: usize, m: usize) -> Vector3<f64> {
    direction * ((k as f64 - m as f64) * step)
}

/// A depth map lifted to 3D: one base point per valid pixel plus 2m+1
/// displaced hypotheses per base point, flat in base-major order
/// (`p * (2m+1) + k`). The middle hypothesis (`k = m`) is the base
/// point itself.
#[derive(Debug, Clone)]
pub struct HypothesisCloud {
    base_points: Vec<Vector3<f64>>,
    base_depths: Vec<f64>,
    pixels: Vec<(usize, usize)>,
    resolution: (usize, usize),
    hypotheses: Vec<Vector3<f64>>,
    step: f64,
    m: usize,
    direction: Vector3<f64>,
    features: Option<Array2<f64>>,
}

impl HypothesisCloud {
    /// Number of base points (valid source pixels).
    pub fn num_points(&self) -> usize {
        self.base_points.len()
    }

    /// Total hypothesis count, `num_points * hypotheses_per_point`.
    pub fn num_hypotheses(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn hypotheses_per_point(&self) -> usize {
        2 * self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        self.base_points.is_empty()
    }

    pub fn base_point(&self, p: usize) -> WorldPoint {
        WorldPoint {
            position: self.base_points[p],
        }
    }

    /// Camera-frame depth of base point `p` in the reference view.
    pub fn base_depth(&self, p: usize) -> f64 {
        self.base_depths[p]
    }

    pub fn hypothesis(&self, p: usize, k: usize) -> WorldPoint {
        self.hypothesis_flat(p * self.hypotheses_per_point() + k)
    }

    /// Hypothesis by flat base-major index.
    pub fn hypothesis_flat(&self, i: usize) -> WorldPoint {
        WorldPoint {
            position: self.hypotheses[i],
        }
    }

    /// Source pixel `(row, col)` of each base point, in the resolution
    /// of the depth map the cloud was lifted from.
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    /// `(rows, cols)` of the source depth map.
    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Unit displacement direction (the reference viewing direction).
    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    /// Per-hypothesis feature rows, once attached.
    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    /// Attach per-hypothesis feature rows (`[num_hypotheses, F]`).
    pub fn set_features(&mut self, features: Array2<f64>) -> Result<()> {
        if features.nrows() != self.num_hypotheses() {
            return Err(Error::data(format!(
                "{} feature rows do not cover {} hypotheses",
                features.nrows(),
                self.num_hypotheses()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("hypothesis features must be finite"));
        }
        self.features = Some(features);
        Ok(())
    }

    /// All hypothesis positions as `[num_hypotheses, 3]` rows.
    pub fn positions_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.hypotheses.len(), 3), |(i, j)| self.hypotheses[i][j])
    }

    /// Relabel base points: entry `new_p` of the result is old point
    /// `perm[new_p]` with its whole hypothesis block. Attached features
    /// are dropped (their row order would be stale).
    ///
    /// Panics when `perm` is not a permutation of `0..num_points()`.
    pub fn permute_points(&self, perm: &[usize]) -> HypothesisCloud {
        let p = self.num_points();
        let per = self.hypotheses_per_point();
        assert_eq!(perm.len(), p, "permutation length");
        let mut seen = vec![false; p];
        for &i in perm {
            assert!(i < p && !seen[i], "not a permutation");
            seen[i] = true;
        }
        let mut out = HypothesisCloud {
            base_points: Vec::with_capacity(p),
            base_depths: Vec::with_capacity(p),
            pixels: Vec::with_capacity(p),
            resolution: self.resolution,
            hypotheses: Vec::with_capacity(p * per),
            step: self.step,
            m: self.m,
            direction: self.direction,
            features: None,
        };
        for &old in perm {
            out.base_points.push(self.base_points[old]);
            out.base_depths.push(self.base_depths[old]);
            out.pixels.push(self.pixels[old]);
            out.hypotheses
                .extend_from_slice(&self.hypotheses[old * per..(old + 1) * per]);
        }
        out
    }

    /// A bare point set with no displaced hypotheses (m = 0): each
    /// point is its own single hypothesis. Useful for exercising graph
    /// construction on hand-placed geometry.
    pub fn degenerate(
        points: Vec<Vector3<f64>>,
        pixels: Vec<(usize, usize)>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        if points.len() != pixels.len() {
            return Err(Error::data(format!(
                "{} points but {} pixels",
                points.len(),
                pixels.len()
            )));
        }
        for &(r, c) in &pixels {
            if r >= resolution.0 || c >= resolution.1 {
                return Err(Error::data(format!(
                    "pixel ({r}, {c}) outside {}x{} raster",
                    resolution.0, resolution.1
                )));
            }
        }
        Ok(HypothesisCloud {
            base_depths: vec![0.0; points.len()],
            hypotheses: points.clone(),
            base_points: points,
            pixels,
            resolution,
            step: 0.0,
            m: 0,
            direction: Vector3::new(0.0, 0.0, 1.0),
            features: None,
        })
    }
}

/// Pyramid level whose raster matches `(rows, cols)`, i.e. the L with
/// `view.level_size(L) == (cols, rows)`.
pub(crate) fn map_level(view: &CameraView, dim: (usize, usize)) -> Result<usize> {
    let (rows, cols) = dim;
    for level in 0..=6 {
        let (w, h) = view.level_size(level);
        if (w as usize, h as usize) == (cols, rows) {
            return Ok(level);
        }
    }
    Err(Error::data(format!(
        "{cols}x{rows} depth raster is not a pyramid level of the {}x{} view",
        view.image_size.0, view.image_size.1
    )))
}

/// Lift the valid pixels of a depth map into a hypothesis cloud.
///
/// Every valid pixel unprojects through the reference view; 2m+1
/// hypotheses per point sit at exact signed offsets `(k - m) * s` along
/// the unit viewing direction, so hypothesis `m` is the base point and
/// the projected reference depth of hypothesis `k` is the pixel depth
/// plus `(k - m) * s`. An all-invalid map yields an empty cloud, which
/// downstream stages carry through rather than reject.
pub fn generate_hypotheses(
    depth: &DepthMap,
    ref_view: &CameraView,
    step: f64,
    m: usize,
) -> Result<HypothesisCloud> {
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::config(format!(
            "hypothesis step must be positive, got {step}"
        )));
    }
    if m == 0 {
        return Err(Error::config(
            "hypothesis half-count m must be at least 1 (2m+1 candidates per point)",
        ));
    }
    let (rows, cols) = depth.dim();
    let factor = 1usize << map_level(ref_view, (rows, cols))?;
    let direction = camera_direction(ref_view);
    let center = ref_view.center();
    let mut cloud = HypothesisCloud {
        base_points: Vec::new(),
        base_depths: Vec::new(),
        pixels: Vec::new(),
        resolution: (rows, cols),
        hypotheses: Vec::new(),
        step,
        m,
        direction,
        features: None,
    };
    for r in 0..rows {
        for c in 0..cols {
            let Some(d) = depth.get(r, c) else { continue };
            let pixel = Vector2::new((c * factor) as f64, (r * factor) as f64);
            let ray = ref_view.pixel_ray(pixel);
            let base = center + d * ray;
            cloud.base_points.push(base);
            cloud.base_depths.push(d);
            cloud.pixels.push((r, c));
            for k in 0..2 * m + 1 {
                cloud
                    .hypotheses
                    .push(base + hypothesis_offset(direction, step, k, m));
            }
        }
    }
    Ok(cloud)
}

/// Per-iteration step sizes and upsampling factors for the refinement
/// driver. Step sizes must decrease strictly; factors are 1 (keep
/// resolution) or 2 (nearest-neighbor upsample before refining).
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSchedule {
    steps: Vec<f64>,
    upsample: Vec<usize>,
}

impl RefinementSchedule {
    pub fn new(steps: Vec<f64>, upsample: Vec<usize>) -> Result<Self> {
        if steps.len() != upsample.len() {
            return Err(Error::config(format!(
                "{} step sizes but {} upsample factors",
                steps.len(),
                upsample.len()
            )));
        }
        for (i, &s) in steps.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::config(format!(
                    "step sizes must be positive, got {s}"
                )));
            }
            if i > 0 && s >= steps[i - 1] {
                return Err(Error::config(format!(
                    "step sizes must decrease strictly, got {} then {s}",
                    steps[i - 1]
                )));
            }
        }
        if let Some(&f) = upsample.iter().find(|&&f| f != 1 && f != 2) {
            return Err(Error::config(format!(
                "upsample factors must be 1 or 2, got {f}"
            )));
        }
        Ok(RefinementSchedule { steps, upsample })
    }

    /// The usual arrangement: refine once at the coarse resolution,
    /// then double the resolution before each later iteration.
    pub fn with_standard_upsampling(steps: Vec<f64>) -> Result<Self> {
        let upsample = (0..steps.len()).map(|i| if i == 0 { 1 } else { 2 }).collect();
        Self::new(steps, upsample)
    }

    /// Number of refinement iterations (may be zero).
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn upsample_factors(&self) -> &[usize] {
        &self.upsample
    }
}

/// Nearest-neighbor upsampling of a depth map. Only a factor of 2 is
/// supported; anything else is a configuration error.
pub fn upsample_depth(depth: &DepthMap, factor: usize) -> Result<DepthMap> {
    if factor != 2 {
        return Err(Error::config(format!(
            "unsupported upsampling factor {factor}; only 2 is available"
        )));
    }
    Ok(depth.upsample2x())
}

/// Add a per-pixel depth displacement to the valid pixels of a map.
/// The validity mask is unchanged; displacements at invalid pixels are
/// ignored.
pub fn apply_residual(depth: &DepthMap, displacements: &Array2<f64>) -> Result<DepthMap> {
    if displacements.dim() != depth.dim() {
        return Err(Error::data(format!(
            "displacement raster {:?} does not match depth map {:?}",
            displacements.dim(),
            depth.dim()
        )));
    }
    let mut values = depth.raster().clone();
    for ((r, c), &ok) in depth.mask().indexed_iter() {
        if ok {
            let d = displacements[(r, c)];
            if !d.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite displacement {d} at valid pixel ({r}, {c})"
                )));
            }
            values[(r, c)] += d;
        }
    }
    DepthMap::new(values, depth.mask().clone())
}

/// Tape-resident inputs for dynamic multi-view feature fetching: the
/// calibrated views (reference first) and each view's pyramid taps.
pub(crate) struct FetchTaps<'a> {
    pub views: &'a [CameraView],
    pub taps: &'a [[Var; PYRAMID_LEVELS]],
    pub bounds: &'a SceneBounds,
    pub multi_level: bool,
}

/// Fetch per-hypothesis features at 3D positions `hyps` (`[N, 3]`): the
/// multi-view feature variance of every pyramid level in use (or only
/// the coarsest), concatenated with the normalized point coordinates.
///
/// A view contributes to a hypothesis only when the point projects in
/// front of the camera and inside the full-resolution raster; the
/// variance then runs over the visible subset with the matching 1/n.
/// Visibility itself enters as a constant gate (its indicator has zero
/// derivative almost everywhere), while positions stay differentiable
/// through projection and bilinear sampling. A hypothesis visible
/// nowhere gets zero variance features.
///
/// Also returns, per hypothesis, whether any SOURCE view (views[1..])
/// sees it — the driver keeps base points with no such hypothesis at
/// their incoming depth.
pub(crate) fn hypothesis_features_on_tape(
    tape: &mut Tape,
    ctx: &FetchTaps,
    hyps: Var,
) -> Result<(Var, Vec<bool>)> {
    if ctx.views.len() < 2 {
        return Err(Error::data(
            "feature fetching needs a reference and at least one source view",
        ));
    }
    if ctx.views.len() != ctx.taps.len() {
        return Err(Error::data(format!(
            "{} views but {} tap pyramids",
            ctx.views.len(),
            ctx.taps.len()
        )));
    }
    let n = tape.value(hyps).shape()[0];
    let levels: Vec<usize> = if ctx.multi_level {
        (0..PYRAMID_LEVELS).collect()
    } else {
        vec![PYRAMID_LEVELS - 1]
    };

    let mut gates: Vec<Vec<f64>> = Vec::with_capacity(ctx.views.len());
    let mut fetched: Vec<Vec<Var>> = vec![Vec::with_capacity(ctx.views.len()); levels.len()];
    for (vi, view) in ctx.views.iter().enumerate() {
        let proj = tape.project_points(hyps, &view.intrinsics, &view.rotation, &view.translation);
        let (w0, h0) = view.image_size;
        let pv = tape.value(proj);
        let gate: Vec<f64> = (0..n)
            .map(|i| {
                let (u, v, z) = (pv[[i, 0]], pv[[i, 1]], pv[[i, 2]]);
                let visible = z > PROJECT_MIN_DEPTH
                    && u >= 0.0
                    && u <= (w0 - 1) as f64
                    && v >= 0.0
                    && v <= (h0 - 1) as f64;
                if visible { 1.0 } else { 0.0 }
            })
            .collect();
        let uv = tape.slice_axis(proj, 1, 0, 2);
        for (li, &level) in levels.iter().enumerate() {
            let pix = tape.scale(uv, 1.0 / level_factor(level) as f64);
            fetched[li].push(tape.bilinear_fetch(ctx.taps[vi][level], pix));
        }
        gates.push(gate);
    }

    let counts: Vec<f64> = (0..n).map(|i| gates.iter().map(|g| g[i]).sum()).collect();
    let src_visible: Vec<bool> = (0..n)
        .map(|i| gates[1..].iter().any(|g| g[i] > 0.5))
        .collect();

    let mut parts = Vec::with_capacity(levels.len() + 1);
    for per_view in &fetched {
        let channels = tape.value(per_view[0]).shape()[1];
        let mut sum_f: Option<Var> = None;
        let mut sum_f2: Option<Var> = None;
        for (vi, &f) in per_view.iter().enumerate() {
            let gate_rows =
                Array2::from_shape_fn((n, channels), |(i, _)| gates[vi][i]).into_dyn();
            let g = tape.leaf(gate_rows);
            let gf = tape.mul(f, g);
            let f2 = tape.mul(f, f);
            let gf2 = tape.mul(f2, g);
            sum_f = Some(match sum_f {
                None => gf,
                Some(acc) => tape.add(acc, gf),
            });
            sum_f2 = Some(match sum_f2 {
                None => gf2,
                Some(acc) => tape.add(acc, gf2),
            });
        }
        let inv_n = Array2::from_shape_fn((n, channels), |(i, _)| {
            if counts[i] > 0.0 {
                1.0 / counts[i]
            } else {
                0.0
            }
        })
        .into_dyn();
        let inv_n = tape.leaf(inv_n);
        let mean = tape.mul(sum_f.expect("at least one view"), inv_n);
        let mean_sq = tape.mul(sum_f2.expect("at least one view"), inv_n);
        let sq_mean = tape.mul(mean, mean);
        parts.push(tape.sub(mean_sq, sq_mean));
    }
    let (scale, offset) = ctx.bounds.affine();
    parts.push(tape.affine_rows(hyps, &scale, &offset));
    Ok((tape.concat(&parts, 1), src_visible))
}

/// Place each pyramid's level arrays on a tape as constant leaves.
pub(crate) fn leaf_pyramids(
    tape: &mut Tape,
    pyramids: &[FeaturePyramid],
) -> Result<Vec<[Var; PYRAMID_LEVELS]>> {
    pyramids
        .iter()
        .map(|p| {
            Ok([
                tape.leaf(p.level(0)?.clone().into_dyn()),
                tape.leaf(p.level(1)?.clone().into_dyn()),
                tape.leaf(p.level(2)?.clone().into_dyn()),
            ])
        })
        .collect()
}

/// Normalization bounds for the whole refinement: the bounding box of
/// every base point of the coarse cloud, padded by the maximum
/// hypothesis excursion of the first (largest-step) iteration plus a
/// fixed margin. Derived from the full coarse map regardless of any
/// ROI, so restricted and unrestricted runs normalize identically.
/// `None` when the coarse map has no valid pixel or no iterations run.
fn refinement_bounds(
    coarse: &DepthMap,
    ref_view: &CameraView,
    schedule: &RefinementSchedule,
    m: usize,
) -> Result<Option<SceneBounds>> {
    if schedule.is_empty() || coarse.valid_count() == 0 {
        return Ok(None);
    }
    let (rows, cols) = coarse.dim();
    let factor = 1usize << map_level(ref_view, (rows, cols))?;
    let center = ref_view.center();
    let mut points = Vec::with_capacity(coarse.valid_count());
    for r in 0..rows {
        for c in 0..cols {
            let Some(d) = coarse.get(r, c) else { continue };
            let pixel = Vector2::new((c * factor) as f64, (r * factor) as f64);
            points.push(center + d * ref_view.pixel_ray(pixel));
        }
    }
    let margin = m as f64 * schedule.steps()[0] + BOUNDS_EXTRA_MARGIN_MM;
    SceneBounds::around(points, margin).map(Some)
}

/// Neighbor count actually used for a cloud: the configured k, capped
/// below the hypothesis count so the graph stays buildable when an
/// iteration refines only a handful of points (e.g. a tiny ROI).
fn effective_knn(k: usize, cloud: &HypothesisCloud) -> usize {
    k.min(cloud.num_hypotheses().saturating_sub(1))
}

/// Mask for iteration resolution `dim_i`, derived from a final-
/// resolution ROI: a pixel refines when any of its descendant pixels at
/// the final resolution is inside the ROI. `None` means no restriction.
fn derive_roi(
    roi: Option<&Array2<bool>>,
    final_dim: (usize, usize),
    dim_i: (usize, usize),
) -> Array2<bool> {
    match roi {
        None => Array2::from_elem(dim_i, true),
        Some(r) => {
            let br = final_dim.0 / dim_i.0;
            let bc = final_dim.1 / dim_i.1;
            Array2::from_shape_fn(dim_i, |(y, x)| {
                (0..br).any(|dy| (0..bc).any(|dx| r[(y * br + dy, x * bc + dx)]))
            })
        }
    }
}

/// Row-major `(row, col)` list and flat indices of the set pixels.
fn masked_pixels(mask: &Array2<bool>) -> (Vec<(usize, usize)>, Vec<usize>) {
    let w = mask.ncols();
    let mut pixels = Vec::new();
    let mut flat = Vec::new();
    for ((r, c), &on) in mask.indexed_iter() {
        if on {
            pixels.push((r, c));
            flat.push(r * w + c);
        }
    }
    (pixels, flat)
}

/// World-frame rays through the listed pixels of a level-`log2(factor)`
/// raster, scaled so depth along the ray equals camera-frame depth.
fn pixel_rays(view: &CameraView, pixels: &[(usize, usize)], factor: usize) -> Array2<f64> {
    let mut rays = Array2::zeros((pixels.len(), 3));
    for (i, &(r, c)) in pixels.iter().enumerate() {
        let ray = view.pixel_ray(Vector2::new((c * factor) as f64, (r * factor) as f64));
        for j in 0..3 {
            rays[(i, j)] = ray[j];
        }
    }
    rays
}

/// The refinement transcript: `maps[0]` is the coarse input and
/// `maps[i]` the result of iteration `i`; `confidences[i - 1]` holds
/// the per-pixel maximum hypothesis probability of iteration `i` (zero
/// at pixels that iteration did not refine).
#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub maps: Vec<DepthMap>,
    pub confidences: Vec<Array2<f64>>,
}

/// One plain refinement pass over `current`: lift the pixels under
/// `roi` to hypotheses, score them, and apply the expected displacement.
/// Base points with no hypothesis visible in any source view keep their
/// depth and report zero confidence.
fn refine_map_once(
    store: &ParamStore,
    cfg: &Config,
    views: &[CameraView],
    pyramids: &[FeaturePyramid],
    bounds: &SceneBounds,
    current: &DepthMap,
    roi: &Array2<bool>,
    step: f64,
) -> Result<(DepthMap, Array2<f64>)> {
    let dim = current.dim();
    let mut mask = current.mask().clone();
    mask.zip_mut_with(roi, |m, &r| *m = *m && r);
    if mask.iter().all(|&b| !b) {
        return Ok((current.clone(), Array2::zeros(dim)));
    }
    let masked = DepthMap::new(current.raster().clone(), mask)?;
    let mut cloud = generate_hypotheses(&masked, &views[0], step, cfg.refine.m)?;
    let k = effective_knn(cfg.refine.knn, &cloud);
    let graph = build_knn_graph(&cloud, k, cfg.refine.knn_mode, cfg.refine.knn_window)?;

    // Fetch features on a short-lived tape, then drop it before the
    // network forward allocates its own scratch space.
    let (features, src_visible) = {
        let mut tape = Tape::new();
        let taps = leaf_pyramids(&mut tape, pyramids)?;
        let hyps = tape.leaf(cloud.positions_matrix().into_dyn());
        let ctx = FetchTaps {
            views,
            taps: &taps,
            bounds,
            multi_level: cfg.model.multi_level_features,
        };
        let (f, vis) = hypothesis_features_on_tape(&mut tape, &ctx, hyps)?;
        let values = tape
            .value(f)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("feature rows are 2-d");
        (values, vis)
    };
    cloud.set_features(features)?;

    let probs = predict_flow(store, &cfg.model, &cloud, &graph)?;
    let dd = expected_displacement(&probs, step, cfg.refine.m)?;

    let per = cloud.hypotheses_per_point();
    let mut disp = Array2::zeros(dim);
    let mut conf = Array2::zeros(dim);
    for p in 0..cloud.num_points() {
        let (r, c) = cloud.pixels()[p];
        let refinable = src_visible[p * per..(p + 1) * per].iter().any(|&v| v);
        let gate = if refinable { 1.0 } else { 0.0 };
        disp[(r, c)] = dd[p] * gate;
        if refinable {
            conf[(r, c)] = probs.row(p).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        }
    }
    Ok((apply_residual(current, &disp)?, conf))
}

/// Refine a coarse depth map through the schedule: per iteration,
/// optionally upsample 2x (nearest), lift the pixels inside the
/// iteration's ROI to hypotheses, score them with the flow network on
/// dynamically fetched multi-view features, and add the expected
/// displacement. Pixels outside the ROI, and base points whose
/// hypotheses no source view sees, carry their depth through unchanged.
///
/// `views` lists the reference view first; `pyramids` must align with
/// it. The optional `roi` is given at the final (post-upsampling)
/// resolution; coarser iterations refine every pixel with a descendant
/// inside it. When an iteration lifts fewer points than the configured
/// neighbor count needs, the count shrinks to what the point set
/// supports. Returns the full transcript including the coarse map.
pub fn refine_iteratively(
    store: &ParamStore,
    cfg: &Config,
    coarse: &DepthMap,
    views: &[CameraView],
    pyramids: &[FeaturePyramid],
    schedule: &RefinementSchedule,
    roi: Option<&Array2<bool>>,
) -> Result<RefinementResult> {
    if views.len() < 2 {
        return Err(Error::data(
            "refinement needs a reference and at least one source view",
        ));
    }
    if pyramids.len() != views.len() {
        return Err(Error::data(format!(
            "{} views but {} pyramids",
            views.len(),
            pyramids.len()
        )));
    }
    for (view, pyramid) in views.iter().zip(pyramids) {
        let level0 = pyramid.level(0)?.dim();
        let expect = (view.image_size.1 as usize / 2, view.image_size.0 as usize / 2);
        if (level0.1, level0.2) != expect {
            return Err(Error::data(format!(
                "pyramid level-0 raster {}x{} does not match the {}x{} view",
                level0.2, level0.1, view.image_size.0, view.image_size.1
            )));
        }
    }
    let (h0, w0) = coarse.dim();
    let total: usize = schedule.upsample_factors().iter().product();
    let final_dim = (h0 * total, w0 * total);
    if let Some(r) = roi {
        if r.dim() != final_dim {
            return Err(Error::data(format!(
                "ROI raster {:?} does not match the final resolution {:?}",
                r.dim(),
                final_dim
            )));
        }
    }

    let bounds = refinement_bounds(coarse, &views[0], schedule, cfg.refine.m)?;
    let mut current = coarse.clone();
    let mut maps = vec![coarse.clone()];
    let mut confidences = Vec::with_capacity(schedule.iterations());
    for i in 0..schedule.iterations() {
        if schedule.upsample_factors()[i] == 2 {
            current = upsample_depth(&current, 2)?;
        }
        let dim_i = current.dim();
        let roi_i = derive_roi(roi, final_dim, dim_i);
        let (next, conf) = match &bounds {
            None => (current.clone(), Array2::zeros(dim_i)),
            Some(b) => refine_map_once(
                store,
                cfg,
                views,
                pyramids,
                b,
                &current,
                &roi_i,
                schedule.steps()[i],
            )?,
        };
        current = next;
        maps.push(current.clone());
        confidences.push(conf);
    }
    Ok(RefinementResult { maps, confidences })
}

/// The whole refinement chain as one tape expression, for training:
/// `depths[0]` is the coarse input variable and `depths[i]` the result
/// of iteration `i`, each a `[rows, cols]` map at that iteration's
/// resolution with `masks[i]` marking its valid pixels. Graph
/// construction and visibility gating read forward values (they are
/// discrete), while depths, positions, features, and probabilities stay
/// differentiable end to end. Values match [`refine_iteratively`] bit
/// for bit on the same inputs.
pub(crate) struct RefineChain {
    pub depths: Vec<Var>,
    pub masks: Vec<Array2<bool>>,
}

pub(crate) fn refine_chain_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    cfg: &Config,
    coarse_depth: Var,
    coarse_valid: &Array2<bool>,
    views: &[CameraView],
    taps: &[[Var; PYRAMID_LEVELS]],
    schedule: &RefinementSchedule,
) -> Result<RefineChain> {
    if views.len() < 2 {
        return Err(Error::data(
            "refinement needs a reference and at least one source view",
        ));
    }
    if taps.len() != views.len() {
        return Err(Error::data(format!(
            "{} views but {} tap pyramids",
            views.len(),
            taps.len()
        )));
    }
    let shape = bt.tape.value(coarse_depth).shape().to_vec();
    if shape.len() != 2 || shape != [coarse_valid.nrows(), coarse_valid.ncols()] {
        return Err(Error::data(format!(
            "coarse depth {shape:?} does not match the {:?} validity mask",
            coarse_valid.dim()
        )));
    }

    let coarse_values = bt
        .tape
        .value(coarse_depth)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("coarse depth is 2-d");
    let coarse_map = DepthMap::new(coarse_values, coarse_valid.clone())?;
    let bounds = refinement_bounds(&coarse_map, &views[0], schedule, cfg.refine.m)?;

    let mut current = coarse_depth;
    let mut valid = coarse_valid.clone();
    let mut depths = vec![current];
    let mut masks = vec![valid.clone()];
    for i in 0..schedule.iterations() {
        if schedule.upsample_factors()[i] == 2 {
            let (h, w) = (valid.nrows(), valid.ncols());
            let lifted = bt.tape.reshape(current, &[1, h, w]);
            let up = bt.tape.upsample2x_2d(lifted);
            current = bt.tape.reshape(up, &[2 * h, 2 * w]);
            valid = Array2::from_shape_fn((2 * h, 2 * w), |(y, x)| valid[(y / 2, x / 2)]);
        }
        let (h, w) = (valid.nrows(), valid.ncols());
        let Some(bounds) = &bounds else {
            depths.push(current);
            masks.push(valid.clone());
            continue;
        };
        let step = schedule.steps()[i];
        let m = cfg.refine.m;
        let per = 2 * m + 1;

        // A plain twin of the current map drives the discrete stages
        // (pixel enumeration, kNN) from the tape's forward values.
        let values = bt
            .tape
            .value(current)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("depth map is 2-d");
        let map_now = DepthMap::new(values, valid.clone())?;
        let cloud = generate_hypotheses(&map_now, &views[0], step, m)?;
        if cloud.is_empty() {
            depths.push(current);
            masks.push(valid.clone());
            continue;
        }
        let k = effective_knn(cfg.refine.knn, &cloud);
        let graph = build_knn_graph(&cloud, k, cfg.refine.knn_mode, cfg.refine.knn_window)?;

        let (pixels, idx) = masked_pixels(&valid);
        debug_assert_eq!(pixels, cloud.pixels());
        let pcount = pixels.len();
        let factor = 1usize << map_level(&views[0], (h, w))?;
        let rays = pixel_rays(&views[0], &pixels, factor);

        let flat = bt.tape.reshape(current, &[h * w]);
        let d_px = bt.tape.gather(flat, &idx);
        let points = bt.tape.unproject_depths(d_px, rays, views[0].center());
        let mut stacked = Vec::with_capacity(per);
        for k in 0..per {
            let off = hypothesis_offset(cloud.direction(), step, k, m);
            let off_rows = Array2::from_shape_fn((pcount, 3), |(_, j)| off[j]).into_dyn();
            let off_leaf = bt.tape.leaf(off_rows);
            stacked.push(bt.tape.add(points, off_leaf));
        }
        let k_major = bt.tape.concat(&stacked, 0);
        let perm: Vec<usize> = (0..pcount)
            .flat_map(|p| (0..per).map(move |k| k * pcount + p))
            .collect();
        let hyps = bt.tape.gather(k_major, &perm);

        let ctx = FetchTaps {
            views,
            taps,
            bounds,
            multi_level: cfg.model.multi_level_features,
        };
        let (features, src_visible) = hypothesis_features_on_tape(&mut bt.tape, &ctx, hyps)?;
        let probs = predict_flow_on_tape(bt, store, &cfg.model, features, &graph, pcount, per)?;
        let dd = expected_displacement_on_tape(&mut bt.tape, probs, step, m);
        let gate = Array1::from_shape_fn(pcount, |p| {
            let refinable = src_visible[p * per..(p + 1) * per].iter().any(|&v| v);
            if refinable { 1.0 } else { 0.0 }
        })
        .into_dyn();
        let gate = bt.tape.leaf(gate);
        let dd_gated = bt.tape.mul(dd, gate);
        let updated = bt.tape.add(d_px, dd_gated);
        let next_flat = bt.tape.scatter(flat, updated, &idx);
        current = bt.tape.reshape(next_flat, &[h, w]);
        depths.push(current);
        masks.push(valid.clone());
    }
    Ok(RefineChain { depths, masks })
}
