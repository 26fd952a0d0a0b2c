//! Deterministic synthetic multi-view scenes.
//!
//! Real capture rigs are replaced by ray-cast renders of simple
//! parametric surfaces wearing procedural noise textures: the texture
//! gives the matcher something to latch onto (an untextured surface
//! makes stereo ill-posed), the parametric geometry gives exact
//! ground-truth depth per pixel, and a seeded hash makes every byte of
//! the output reproducible. Scenes are desk-scale: working distances
//! of a few hundred millimeters, a reference camera at the origin
//! looking down +z, and source cameras fanned out on a horizontal arc
//! around the scene center.
//!
//! The on-disk layout matches what the rest of the pipeline consumes:
//! a directory per scene with PNG images, camera text files, PFM
//! ground-truth depths, and a PLY ground-truth cloud.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SynthConfig;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{centered_intrinsics, look_at, CameraView};
use crate::io::camera::{read_camera, write_camera, CameraRecord};
use crate::io::dataset::{list_scenes, scene_dir_name, ScenePaths};
use crate::io::image::{read_image, write_image};
use crate::io::pfm::{read_pfm, write_pfm};
use crate::io::ply::{read_ply, write_ply, PlyCloud};

/// Grid size the camera files' depth interval refers to: a scene's
/// sweep range spans `depth_min + (SWEEP_GRID - 1) * depth_interval`.
/// Consumers recover the exact range with [`sweep_range`] regardless of
/// how many planes they then place inside it.
pub const SWEEP_GRID: usize = 96;

/// Depth sweep range recorded in a camera file.
pub fn sweep_range(rec: &CameraRecord) -> (f64, f64) {
    (rec.depth_min, rec.depth_max(SWEEP_GRID))
}

/// One ball of a sphere-set scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Parametric scene surface, in the world frame (= reference camera
/// frame: x right, y down, z into the scene, millimeters).
#[derive(Debug, Clone, PartialEq)]
pub enum SceneGeometry {
    /// The plane `z = depth + tilt.0 * x + tilt.1 * y`. With zero tilt
    /// it is fronto-parallel and every reference ground-truth pixel
    /// equals `depth` exactly.
    Plane { depth: f64, tilt: (f64, f64) },
    /// A noise-displaced plane `z = base + amplitude * n(x, y)` with
    /// `n` in [-1, 1] band-limited to `frequency` cycles per 500mm.
    /// Kept gentle enough (|∇z| < 1) that every ray crosses it once.
    Heightfield {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
    /// Opaque spheres in front of a fronto-parallel backdrop plane.
    SphereSet {
        spheres: Vec<Sphere>,
        background: f64,
    },
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: SceneGeometry,
    /// Total cameras: the reference plus `num_views - 1` sources.
    pub num_views: usize,
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels (shared by fx and fy).
    pub focal: f64,
    /// Angular spacing between neighboring cameras on the arc
    /// (radians).
    pub arc_step: f64,
    /// Texture cycles per 500mm of surface.
    pub texture_frequency: f64,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.num_views < 2 {
            return Err(Error::config(format!(
                "a scene needs at least 2 views, got {}",
                self.num_views
            )));
        }
        if self.width == 0 || self.height == 0 || self.width % 8 != 0 || self.height % 8 != 0
        {
            return Err(Error::config(format!(
                "resolution must be positive and divisible by 8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.focal <= 0.0 {
            return Err(Error::config("focal length must be positive"));
        }
        if !(self.arc_step > 0.0 && self.arc_step < 0.5) {
            return Err(Error::config(format!(
                "arc_step must be in (0, 0.5) radians, got {}",
                self.arc_step
            )));
        }
        if self.texture_frequency <= 0.0 {
            return Err(Error::config("texture_frequency must be positive"));
        }
        match &self.geometry {
            SceneGeometry::Plane { depth, tilt } => {
                if *depth <= 0.0 {
                    return Err(Error::config("plane depth must be positive"));
                }
                if tilt.0.abs() >= 0.5 || tilt.1.abs() >= 0.5 {
                    return Err(Error::config("plane tilt must stay below 0.5"));
                }
            }
            SceneGeometry::Heightfield {
                base,
                amplitude,
                frequency,
            } => {
                if *base <= 0.0 || *amplitude < 0.0 || *frequency <= 0.0 {
                    return Err(Error::config("heightfield parameters out of range"));
                }
                // Surface slope is bounded by amplitude * 3 * freq/500
                // (the smoothstep lattice slope); keep it under 1 so a
                // marching ray crosses the surface exactly once.
                if amplitude * 3.0 * frequency / 500.0 >= 1.0 {
                    return Err(Error::config(
                        "heightfield too steep: amplitude * frequency must keep slope < 1",
                    ));
                }
            }
            SceneGeometry::SphereSet {
                spheres,
                background,
            } => {
                if *background <= 0.0 {
                    return Err(Error::config("background depth must be positive"));
                }
                for s in spheres {
                    if s.radius <= 0.0 {
                        return Err(Error::config("sphere radius must be positive"));
                    }
                    if s.center.z - s.radius <= 0.0 {
                        return Err(Error::config(
                            "spheres must sit entirely in front of the cameras",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Representative working distance used as the camera-arc focus.
    fn focus_depth(&self) -> f64 {
        match &self.geometry {
            SceneGeometry::Plane { depth, .. } => *depth,
            SceneGeometry::Heightfield { base, .. } => *base,
            SceneGeometry::SphereSet {
                spheres,
                background,
            } => {
                if spheres.is_empty() {
                    *background
                } else {
                    let mean_z: f64 =
                        spheres.iter().map(|s| s.center.z).sum::<f64>() / spheres.len() as f64;
                    0.5 * (mean_z + background)
                }
            }
        }
    }
}

/// A rendered scene: per-view images, exact cameras, exact depths, the
/// reference-view surface points as a cloud, and the sweep range.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    /// `[H, W, 3]` values in `[0, 1]`, reference first.
    pub images: Vec<Array3<f64>>,
    pub views: Vec<CameraView>,
    pub gt_depths: Vec<DepthMap>,
    /// Ground-truth surface points seen by the reference view.
    pub gt_cloud: Vec<Vector3<f64>>,
    /// `(min, max)` sweep range bracketing every ground-truth depth
    /// with a safety margin.
    pub depth_range: (f64, f64),
}

// --- procedural texture -------------------------------------------------

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    // SplitMix-style integer scramble of the lattice cell and seed;
    // identical on every platform and fast enough to call per sample.
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    h = h.wrapping_add((ix as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h = h.wrapping_add((iy as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    h ^= h >> 31;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise in `[0, 1]`: random values on the integer
/// lattice, blended with a smoothstep. Continuous in (x, y) and exactly
/// reproducible for a given seed.
pub fn value_noise2(x: f64, y: f64, seed: u64) -> f64 {
    let fx = x.floor();
    let fy = y.floor();
    let (ix, iy) = (fx as i64, fy as i64);
    let tx = smoothstep(x - fx);
    let ty = smoothstep(y - fy);
    let v00 = lattice_hash(ix, iy, seed);
    let v10 = lattice_hash(ix + 1, iy, seed);
    let v01 = lattice_hash(ix, iy + 1, seed);
    let v11 = lattice_hash(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

/// Surface albedo at a world point: two octaves of value noise per
/// channel, anchored to world (x, y) so every view sees the same paint.
fn texture(p: &Vector3<f64>, frequency: f64, seed: u64, channel: usize) -> f64 {
    let s = frequency / 500.0;
    let cs = seed ^ (channel as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let n1 = value_noise2(p.x * s, p.y * s, cs);
    let n2 = value_noise2(p.x * s * 2.3, p.y * s * 2.3, cs ^ 0x5bf0_3635);
    0.12 + 0.78 * (0.65 * n1 + 0.35 * n2)
}

// --- ray casting --------------------------------------------------------

/// Band-limited heightfield displacement in `[-1, 1]`.
fn height_noise(x: f64, y: f64, frequency: f64, seed: u64) -> f64 {
    let s = frequency / 500.0;
    2.0 * value_noise2(x * s, y * s, seed ^ 0x48f1_11a7) - 1.0
}

/// Camera-frame depth where the ray `origin + t * ray` first meets the
/// surface, or `None` for a miss. `ray` comes from
/// [`CameraView::pixel_ray`], whose scaling makes the parameter `t`
/// equal the camera-frame depth.
fn surface_depth(
    geometry: &SceneGeometry,
    origin: &Vector3<f64>,
    ray: &Vector3<f64>,
    seed: u64,
) -> Option<f64> {
    match geometry {
        SceneGeometry::Plane { depth, tilt } => {
            plane_depth(*depth, *tilt, origin, ray)
        }
        SceneGeometry::Heightfield {
            base,
            amplitude,
            frequency,
        } => {
            let g = |t: f64| {
                let p = origin + t * ray;
                p.z - (base + amplitude * height_noise(p.x, p.y, *frequency, seed))
            };
            // The validated slope bound makes g strictly increasing, so
            // the first sign change brackets the only root.
            let t_lo = (base - amplitude - 60.0).max(1.0);
            let t_hi = base + amplitude + 60.0;
            let mut prev_t = t_lo;
            let mut prev_g = g(prev_t);
            if prev_g > 0.0 {
                return None;
            }
            let steps = ((t_hi - t_lo) / 2.0).ceil() as usize;
            let mut bracket = None;
            for i in 1..=steps {
                let t = t_lo + (t_hi - t_lo) * i as f64 / steps as f64;
                let gv = g(t);
                if gv >= 0.0 {
                    bracket = Some((prev_t, t));
                    break;
                }
                prev_t = t;
                prev_g = gv;
            }
            let _ = prev_g;
            let (mut lo, mut hi) = bracket?;
            for _ in 0..52 {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Some(0.5 * (lo + hi))
        }
        SceneGeometry::SphereSet {
            spheres,
            background,
        } => {
            let mut best = plane_depth(*background, (0.0, 0.0), origin, ray);
            for s in spheres {
                let oc = origin - s.center;
                let a = ray.dot(ray);
                let b = 2.0 * ray.dot(&oc);
                let c = oc.dot(&oc) - s.radius * s.radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    continue;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t > 0.0 && best.is_none_or(|cur| t < cur) {
                    best = Some(t);
                }
            }
            best
        }
    }
}

fn plane_depth(
    depth: f64,
    tilt: (f64, f64),
    origin: &Vector3<f64>,
    ray: &Vector3<f64>,
) -> Option<f64> {
    let denom = ray.z - tilt.0 * ray.x - tilt.1 * ray.y;
    if denom.abs() < 1e-9 {
        return None;
    }
    let t = (depth + tilt.0 * origin.x + tilt.1 * origin.y - origin.z) / denom;
    (t > 0.0).then_some(t)
}

// --- scene assembly -----------------------------------------------------

fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Cameras on a horizontal arc: the reference sits at the origin
/// looking straight down +z at the scene focus; source `i` swings
/// `ceil(i/2) * arc_step` radians around the focus, alternating sides,
/// so sources in index order are also in nearness order.
fn arc_views(spec: &SceneSpec) -> Result<Vec<CameraView>> {
    let size = (spec.width, spec.height);
    let k = centered_intrinsics(spec.focal, size);
    let focus = Vector3::new(0.0, 0.0, spec.focus_depth());
    let mut views = vec![look_at(k, Vector3::zeros(), focus, size)?];
    for i in 1..spec.num_views {
        let swings = i.div_ceil(2) as f64;
        let sign = if i % 2 == 1 { -1.0 } else { 1.0 };
        let theta = sign * swings * spec.arc_step;
        let position = focus + rot_y(theta) * (-focus);
        views.push(look_at(k, position, focus, size)?);
    }
    Ok(views)
}

/// Render one scene: exact cameras, ray-cast ground-truth depth per
/// pixel, and noise-textured images. Identical specs produce bit-equal
/// bundles.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let views = arc_views(spec)?;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut images = Vec::with_capacity(views.len());
    let mut gt_depths = Vec::with_capacity(views.len());
    let mut gt_cloud = Vec::new();
    let mut d_min = f64::INFINITY;
    let mut d_max = f64::NEG_INFINITY;
    for (vi, view) in views.iter().enumerate() {
        let origin = view.center();
        let mut image = Array3::zeros((h, w, 3));
        let mut raster = ndarray::Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let ray = view.pixel_ray(Vector2::new(x as f64, y as f64));
                let Some(t) = surface_depth(&spec.geometry, &origin, &ray, spec.seed) else {
                    continue;
                };
                let p = origin + t * ray;
                raster[(y, x)] = t;
                for ch in 0..3 {
                    image[(y, x, ch)] = texture(&p, spec.texture_frequency, spec.seed, ch);
                }
                d_min = d_min.min(t);
                d_max = d_max.max(t);
                if vi == 0 {
                    gt_cloud.push(p);
                }
            }
        }
        images.push(image);
        gt_depths.push(DepthMap::from_raster(raster));
    }
    if !d_min.is_finite() {
        return Err(Error::data(
            "scene geometry is invisible from every camera",
        ));
    }
    // Pad the sweep so every ground-truth depth sits strictly inside
    // it, even for perfectly flat scenes.
    let pad = 0.05 * (d_max - d_min) + 20.0;
    Ok(SceneBundle {
        images,
        views,
        gt_depths,
        gt_cloud,
        depth_range: (d_min - pad, d_max + pad),
    })
}

impl SceneBundle {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Write the bundle in the pipeline's dataset layout.
    pub fn save(&self, scene_dir: &Path) -> Result<()> {
        let paths = ScenePaths::new(scene_dir);
        for dir in [paths.images_dir(), paths.cams_dir(), paths.depths_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let interval = (self.depth_range.1 - self.depth_range.0) / (SWEEP_GRID - 1) as f64;
        for (i, view) in self.views.iter().enumerate() {
            write_image(&paths.image(i), &self.images[i])?;
            let rec = CameraRecord::from_view(view, self.depth_range.0, interval);
            write_camera(&paths.camera(i), &rec)?;
            write_pfm(&paths.gt_depth(i), self.gt_depths[i].raster())?;
        }
        write_ply(&paths.gt_cloud(), &PlyCloud::from_points(self.gt_cloud.clone()))
    }

    /// Read a bundle back from the dataset layout. Images come back
    /// 8-bit-quantized and depths in f32 precision — the same data any
    /// downstream command sees.
    pub fn load(scene_dir: &Path) -> Result<SceneBundle> {
        let paths = ScenePaths::new(scene_dir);
        let count = paths.count_views()?;
        if count < 2 {
            return Err(Error::data(format!(
                "{}: a scene needs at least 2 views, found {count}",
                scene_dir.display()
            )));
        }
        let mut images = Vec::with_capacity(count);
        let mut views = Vec::with_capacity(count);
        let mut gt_depths = Vec::with_capacity(count);
        let mut range: Option<(f64, f64)> = None;
        for i in 0..count {
            let image = read_image(&paths.image(i))?;
            let (h, w, _) = image.dim();
            let rec = read_camera(&paths.camera(i))?;
            let this_range = sweep_range(&rec);
            let view = rec.into_view((w as u32, h as u32))?;
            let raster = read_pfm(&paths.gt_depth(i))?;
            if raster.dim() != (h, w) {
                return Err(Error::data(format!(
                    "{}: depth raster {:?} does not match the {w}x{h} image",
                    paths.gt_depth(i).display(),
                    raster.dim()
                )));
            }
            match range {
                None => range = Some(this_range),
                Some(r) if r == this_range => {}
                Some(r) => {
                    return Err(Error::data(format!(
                        "{}: inconsistent sweep ranges across views: {r:?} vs {this_range:?}",
                        scene_dir.display()
                    )));
                }
            }
            images.push(image);
            views.push(view);
            gt_depths.push(DepthMap::from_raster(raster));
        }
        let cloud = read_ply(&paths.gt_cloud())?;
        Ok(SceneBundle {
            images,
            views,
            gt_depths,
            gt_cloud: cloud.points,
            depth_range: range.expect("at least two views"),
        })
    }
}

/// Deterministic per-scene seed derived from the dataset seed.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut h = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 31;
    h
}

/// The standard scene mix for dataset generation: scene index picks the
/// geometry family (plane, heightfield, sphere set, repeating) and the
/// scene seed randomizes its parameters inside ranges that keep every
/// surface inside the configured depth envelope.
pub fn scene_spec(cfg: &SynthConfig, index: usize, base_seed: u64) -> SceneSpec {
    let seed = scene_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = cfg.depth_max - cfg.depth_min;
    let lo = cfg.depth_min + 0.2 * span;
    let hi = cfg.depth_max - 0.2 * span;
    let mid = |r: &mut ChaCha8Rng| lo + (hi - lo) * r.random::<f64>();
    let geometry = match index % 3 {
        0 => SceneGeometry::Plane {
            depth: mid(&mut rng),
            tilt: (
                0.24 * (rng.random::<f64>() - 0.5),
                0.24 * (rng.random::<f64>() - 0.5),
            ),
        },
        1 => SceneGeometry::Heightfield {
            // Worst case 40 * 3.5 keeps the rendered slope bound
            // (amplitude * 3 * frequency / 500 < 1) satisfied for every
            // draw, so any seed yields a valid scene.
            base: mid(&mut rng),
            amplitude: 15.0 + 25.0 * rng.random::<f64>(),
            frequency: 2.0 + 1.5 * rng.random::<f64>(),
        },
        _ => {
            let background = hi + 0.1 * span;
            let count = 2 + (rng.random::<f64>() * 3.0) as usize;
            let spheres = (0..count)
                .map(|_| {
                    let radius = 40.0 + 50.0 * rng.random::<f64>();
                    Sphere {
                        center: Vector3::new(
                            240.0 * (rng.random::<f64>() - 0.5),
                            180.0 * (rng.random::<f64>() - 0.5),
                            lo + (hi - lo) * rng.random::<f64>(),
                        ),
                        radius,
                    }
                })
                .collect();
            SceneGeometry::SphereSet {
                spheres,
                background,
            }
        }
    };
    SceneSpec {
        geometry,
        num_views: cfg.num_views,
        width: cfg.width,
        height: cfg.height,
        focal: cfg.focal,
        arc_step: cfg.arc_step,
        texture_frequency: cfg.texture_frequency,
        seed,
    }
}

/// Generate and save `cfg.num_scenes` scenes under `root`, returning
/// the scene directories in index order.
pub fn generate_dataset(cfg: &SynthConfig, root: &Path, base_seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::with_capacity(cfg.num_scenes);
    for i in 0..cfg.num_scenes {
        let spec = scene_spec(cfg, i, base_seed);
        let bundle = generate_scene(&spec)?;
        let dir = root.join(scene_dir_name(i));
        bundle.save(&dir)?;
        dirs.push(dir);
    }
    // Sanity: the listing the consumers will use sees what we wrote.
    let listed = list_scenes(root)?;
    if listed.len() < cfg.num_scenes {
        return Err(Error::data(format!(
            "wrote {} scenes under {} but the listing finds {}",
            cfg.num_scenes,
            root.display(),
            listed.len()
        )));
    }
    Ok(dirs)
}

/// Add i.i.d. zero-mean Gaussian noise to the valid pixels of a depth
/// map; the validity mask is unchanged. `sigma = 0` returns the input
/// bit for bit. Noise that would push a depth to zero or below is a
/// numerical error (choose sigma well under the working distance).
pub fn perturb_depth(depth: &DepthMap, sigma: f64, seed: u64) -> Result<DepthMap> {
    if sigma < 0.0 {
        return Err(Error::config(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(depth.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::config(format!("noise sigma invalid: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = depth.raster().clone();
    for ((r, c), &ok) in depth.mask().indexed_iter() {
        if ok {
            values[(r, c)] += normal.sample(&mut rng);
        }
    }
    DepthMap::new(values, depth.mask().clone())
}
