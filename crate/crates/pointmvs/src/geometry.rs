//! Pinhole camera model: projection, unprojection, intrinsic scaling
//! across pyramid levels, and camera-direction computation.
//!
//! Conventions used everywhere in this crate:
//! - world units are millimeters,
//! - extrinsics map world to camera: `p_cam = R * p_world + t`,
//! - intrinsics are upper-triangular `[fx s cx; 0 fy cy; 0 0 1]` in pixels,
//! - pixel centers sit on integer coordinates starting at `(0, 0)`,
//! - pyramid level `j` halves resolution `j` times, so a level-`j` pixel
//!   coordinate equals the full-resolution coordinate divided by `2^j`.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Orthonormality tolerance for rotation matrices.
const ROTATION_TOL: f64 = 1e-6;

/// A 3D point in the world frame, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint {
    /// World-frame position (mm).
    pub position: Vector3<f64>,
}

impl WorldPoint {
    /// Build a point, rejecting non-finite coordinates.
    pub fn new(position: Vector3<f64>) -> Result<Self> {
        if !position.iter().all(|c| c.is_finite()) {
            return Err(Error::data("world point has non-finite coordinates"));
        }
        Ok(WorldPoint { position })
    }

    /// Build from raw coordinates without the finiteness check.
    pub fn from_xyz(x: f64, y: f64, z: f64) -> Self {
        WorldPoint {
            position: Vector3::new(x, y, z),
        }
    }
}

/// Calibrated pinhole view: intrinsics, world-to-camera extrinsics, and
/// the image raster size the intrinsics refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    /// Upper-triangular intrinsic matrix in pixels.
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation (mm).
    pub translation: Vector3<f64>,
    /// Raster size `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

/// A successful projection: continuous pixel coordinates plus the
/// camera-frame depth of the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    /// Continuous pixel coordinates `(u, v)` in the target level's frame.
    pub pixel: Vector2<f64>,
    /// Camera-frame z coordinate (mm).
    pub depth: f64,
}

impl CameraView {
    /// Build a view, validating the type invariants.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        if intrinsics[(1, 0)].abs() > 0.0 || intrinsics[(2, 0)].abs() > 0.0 || intrinsics[(2, 1)].abs() > 0.0
        {
            return Err(Error::config("intrinsic matrix must be upper-triangular"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::config("focal lengths must be strictly positive"));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > ROTATION_TOL {
            return Err(Error::config("intrinsic matrix must have unit bottom-right entry"));
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).abs().max() > ROTATION_TOL {
            return Err(Error::config("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::config("rotation determinant must be +1"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::config("image size entries must be positive"));
        }
        Ok(CameraView {
            intrinsics,
            rotation,
            translation,
            image_size,
        })
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Intrinsics scaled for pyramid `level` (level 0 = full resolution).
    pub fn level_intrinsics(&self, level: usize) -> Matrix3<f64> {
        let factor = 1.0 / (1u32 << level) as f64;
        scale_intrinsic_matrix(&self.intrinsics, factor)
    }

    /// Raster size at pyramid `level`. Sizes divisible by `2^level` stay exact.
    pub fn level_size(&self, level: usize) -> (u32, u32) {
        let d = 1u32 << level;
        (self.image_size.0 / d, self.image_size.1 / d)
    }

    /// World-frame ray direction through `pixel` (level-0 coordinates),
    /// scaled so that walking `depth` units along it lands on the point
    /// with camera-frame z equal to `depth`.
    pub fn pixel_ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        let kinv = self
            .intrinsics
            .try_inverse()
            .expect("validated intrinsics are invertible");
        let dir_cam = kinv * Vector3::new(pixel.x, pixel.y, 1.0);
        self.rotation.transpose() * dir_cam
    }
}

/// Project a world point into `view` at pyramid `level`.
///
/// Returns `None` when the point lies behind the camera (camera-frame
/// depth <= 0), so batched callers can mask invalid projections.
pub fn project(point: &WorldPoint, view: &CameraView, level: usize) -> Option<PixelDepth> {
    let p_cam = view.rotation * point.position + view.translation;
    let z = p_cam.z;
    if z <= 0.0 || !z.is_finite() {
        return None;
    }
    let k = view.level_intrinsics(level);
    let u = (k[(0, 0)] * p_cam.x + k[(0, 1)] * p_cam.y) / z + k[(0, 2)];
    let v = (k[(1, 1)] * p_cam.y) / z + k[(1, 2)];
    Some(PixelDepth {
        pixel: Vector2::new(u, v),
        depth: z,
    })
}

/// Unproject a full-resolution pixel at the given camera-frame depth.
///
/// The returned point projects back to `(pixel, depth)` under the same
/// view. Non-positive depth is rejected.
pub fn unproject(pixel: Vector2<f64>, depth: f64, view: &CameraView) -> Result<WorldPoint> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::data(format!(
            "unproject requires positive finite depth, got {depth}"
        )));
    }
    let ray = view.pixel_ray(pixel);
    WorldPoint::new(view.center() + depth * ray)
}

fn scale_intrinsic_matrix(k: &Matrix3<f64>, factor: f64) -> Matrix3<f64> {
    let mut out = *k;
    out[(0, 0)] *= factor;
    out[(0, 1)] *= factor;
    out[(0, 2)] *= factor;
    out[(1, 1)] *= factor;
    out[(1, 2)] *= factor;
    out
}

/// Scale intrinsics (focal lengths, skew, principal point) by `factor`,
/// leaving extrinsics untouched. The raster size scales alongside.
pub fn scale_intrinsics(view: &CameraView, factor: f64) -> Result<CameraView> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(Error::config(format!(
            "intrinsic scale factor must be positive, got {factor}"
        )));
    }
    let w = (view.image_size.0 as f64 * factor).round().max(1.0) as u32;
    let h = (view.image_size.1 as f64 * factor).round().max(1.0) as u32;
    Ok(CameraView {
        intrinsics: scale_intrinsic_matrix(&view.intrinsics, factor),
        rotation: view.rotation,
        translation: view.translation,
        image_size: (w, h),
    })
}

/// Normalized world-frame direction of the camera principal (z) axis.
///
/// This is the displacement direction `t` along which point hypotheses
/// are spaced: moving a point by `delta` along it changes its projected
/// depth in this view by exactly `delta`.
pub fn camera_direction(view: &CameraView) -> Vector3<f64> {
    let dir = view.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0);
    dir / dir.norm()
}

/// Build a view at `position` looking at `target`, with the camera
/// y-axis aligned to the world y-axis (x right, y down, z forward).
pub fn look_at(
    intrinsics: Matrix3<f64>,
    position: Vector3<f64>,
    target: Vector3<f64>,
    image_size: (u32, u32),
) -> Result<CameraView> {
    let forward = (target - position).normalize();
    let approx_down = Vector3::new(0.0, 1.0, 0.0);
    let right = approx_down.cross(&forward).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let translation = -(rotation * position);
    CameraView::new(intrinsics, rotation, translation, image_size)
}

/// Simple axis-aligned intrinsics: `fx = fy = focal`, principal point at
/// the raster center, zero skew.
pub fn centered_intrinsics(focal: f64, image_size: (u32, u32)) -> Matrix3<f64> {
    Matrix3::new(
        focal,
        0.0,
        (image_size.0 as f64 - 1.0) / 2.0,
        0.0,
        focal,
        (image_size.1 as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_view() -> CameraView {
        let k = Matrix3::new(800.0, 0.5, 319.5, 0.0, 810.0, 239.5, 0.0, 0.0, 1.0);
        let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.05);
        CameraView::new(
            k,
            rot.matrix().to_owned(),
            Vector3::new(10.0, -20.0, 30.0),
            (640, 480),
        )
        .unwrap()
    }

    fn random_view(rng: &mut ChaCha8Rng) -> CameraView {
        let k = Matrix3::new(
            400.0 + 400.0 * rng.random::<f64>(),
            rng.random::<f64>(),
            300.0 + 40.0 * rng.random::<f64>(),
            0.0,
            400.0 + 400.0 * rng.random::<f64>(),
            220.0 + 40.0 * rng.random::<f64>(),
            0.0,
            0.0,
            1.0,
        );
        let rot = nalgebra::Rotation3::from_euler_angles(
            0.6 * (rng.random::<f64>() - 0.5),
            0.6 * (rng.random::<f64>() - 0.5),
            0.6 * (rng.random::<f64>() - 0.5),
        );
        let t = Vector3::new(
            100.0 * (rng.random::<f64>() - 0.5),
            100.0 * (rng.random::<f64>() - 0.5),
            100.0 * (rng.random::<f64>() - 0.5),
        );
        CameraView::new(k, rot.matrix().to_owned(), t, (640, 480)).unwrap()
    }

    #[test]
    fn principal_axis_point_hits_principal_point() {
        let view = test_view();
        let d = 700.0;
        let center = view.center();
        let axis = camera_direction(&view);
        let p = WorldPoint::new(center + d * axis).unwrap();
        let hit = project(&p, &view, 0).unwrap();
        assert_relative_eq!(hit.pixel.x, view.intrinsics[(0, 2)], epsilon = 1e-8);
        assert_relative_eq!(hit.pixel.y, view.intrinsics[(1, 2)], epsilon = 1e-8);
        assert_relative_eq!(hit.depth, d, epsilon = 1e-8);
    }

    #[test]
    fn behind_camera_is_masked_not_an_error() {
        let view = test_view();
        let behind = WorldPoint::new(view.center() - 100.0 * camera_direction(&view)).unwrap();
        assert!(project(&behind, &view, 0).is_none());
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let view = test_view();
        assert!(unproject(Vector2::new(10.0, 10.0), 0.0, &view).is_err());
        assert!(unproject(Vector2::new(10.0, 10.0), -5.0, &view).is_err());
    }

    #[test]
    fn unproject_principal_point_lands_on_axis() {
        let view = test_view();
        let d = 612.0;
        let pp = Vector2::new(view.intrinsics[(0, 2)], view.intrinsics[(1, 2)]);
        let p = unproject(pp, d, &view).unwrap();
        let expected = view.center() + d * camera_direction(&view);
        assert_relative_eq!((p.position - expected).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn roundtrip_project_unproject_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut max_err = 0.0f64;
        for _ in 0..10 {
            let view = random_view(&mut rng);
            for _ in 0..1000 {
                let px = Vector2::new(
                    639.0 * rng.random::<f64>(),
                    479.0 * rng.random::<f64>(),
                );
                let d = 200.0 + 800.0 * rng.random::<f64>();
                let p = unproject(px, d, &view).unwrap();
                let back = project(&p, &view, 0).unwrap();
                max_err = max_err.max((back.pixel - px).norm());
                max_err = max_err.max((back.depth - d).abs() / d);
            }
        }
        assert!(max_err < 1e-6, "round-trip error {max_err}");
    }

    #[test]
    fn level_pixel_is_half_of_previous_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let view = random_view(&mut rng);
        let p = unproject(Vector2::new(123.4, 210.9), 640.0, &view).unwrap();
        // Oracle: project with explicitly halved intrinsics.
        let half = scale_intrinsics(&view, 0.5).unwrap();
        let full = project(&p, &view, 0).unwrap();
        let lvl1 = project(&p, &view, 1).unwrap();
        let oracle = project(&p, &half, 0).unwrap();
        assert_relative_eq!(lvl1.pixel.x, full.pixel.x / 2.0, epsilon = 1e-9);
        assert_relative_eq!(lvl1.pixel.y, full.pixel.y / 2.0, epsilon = 1e-9);
        assert_relative_eq!(lvl1.pixel.x, oracle.pixel.x, epsilon = 1e-12);
        assert_relative_eq!(lvl1.pixel.y, oracle.pixel.y, epsilon = 1e-12);
        assert_relative_eq!(lvl1.depth, full.depth, epsilon = 1e-12);
    }

    #[test]
    fn scale_intrinsics_identity_and_composition() {
        let view = test_view();
        let same = scale_intrinsics(&view, 1.0).unwrap();
        assert_eq!(same.intrinsics, view.intrinsics);
        let twice = scale_intrinsics(&scale_intrinsics(&view, 0.5).unwrap(), 0.5).unwrap();
        let once = scale_intrinsics(&view, 0.25).unwrap();
        assert_relative_eq!(
            (twice.intrinsics - once.intrinsics).abs().max(),
            0.0,
            epsilon = 1e-12
        );
        assert!(scale_intrinsics(&view, 0.0).is_err());
        assert!(scale_intrinsics(&view, -1.0).is_err());
    }

    #[test]
    fn scale_intrinsics_focal_arithmetic() {
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let view = CameraView::new(k, Matrix3::identity(), Vector3::zeros(), (640, 480)).unwrap();
        let scaled = scale_intrinsics(&view, 1.0 / 8.0).unwrap();
        assert_relative_eq!(scaled.intrinsics[(0, 0)], 100.0, epsilon = 1e-12);
        assert_eq!(scaled.image_size, (80, 60));
        assert_eq!(scaled.rotation, view.rotation);
        assert_eq!(scaled.translation, view.translation);
    }

    #[test]
    fn camera_direction_identity_and_flipped() {
        let k = centered_intrinsics(100.0, (64, 64));
        let ident = CameraView::new(k, Matrix3::identity(), Vector3::zeros(), (64, 64)).unwrap();
        assert_relative_eq!(
            (camera_direction(&ident) - Vector3::new(0.0, 0.0, 1.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
        let flip = nalgebra::Rotation3::from_euler_angles(0.0, std::f64::consts::PI, 0.0);
        let turned =
            CameraView::new(k, flip.matrix().to_owned(), Vector3::zeros(), (64, 64)).unwrap();
        assert_relative_eq!(
            (camera_direction(&turned) - Vector3::new(0.0, 0.0, -1.0)).norm(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn camera_direction_is_third_rotation_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let view = random_view(&mut rng);
            let t = camera_direction(&view);
            // Matrix-algebra oracle: R^T e_z is the third row of R, transposed.
            let row = view.rotation.row(2).transpose();
            assert_relative_eq!((t - row).norm(), 0.0, epsilon = 1e-12);
            assert!((t.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn displacement_along_direction_shifts_depth_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let view = random_view(&mut rng);
            let px = Vector2::new(600.0 * rng.random::<f64>(), 440.0 * rng.random::<f64>());
            let d = 300.0 + 500.0 * rng.random::<f64>();
            let delta = 40.0 * (rng.random::<f64>() - 0.5);
            let p = unproject(px, d, &view).unwrap();
            let moved = WorldPoint::new(p.position + delta * camera_direction(&view)).unwrap();
            let hit = project(&moved, &view, 0).unwrap();
            assert_relative_eq!(hit.depth, d + delta, epsilon = 1e-9 * d.max(1.0));
        }
    }

    #[test]
    fn invalid_views_are_rejected() {
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let mut lower = k;
        lower[(1, 0)] = 2.0;
        assert!(CameraView::new(lower, Matrix3::identity(), Vector3::zeros(), (64, 64)).is_err());
        let mut neg = k;
        neg[(0, 0)] = -5.0;
        assert!(CameraView::new(neg, Matrix3::identity(), Vector3::zeros(), (64, 64)).is_err());
        let skewed_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(k, skewed_rot, Vector3::zeros(), (64, 64)).is_err());
        assert!(CameraView::new(k, Matrix3::identity(), Vector3::zeros(), (0, 64)).is_err());
    }
}
