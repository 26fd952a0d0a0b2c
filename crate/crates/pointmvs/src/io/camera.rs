//! Camera calibration text files.
//!
//! The on-disk convention is line-oriented and interoperable with the
//! common multi-view stereo layout:
//!
//! ```text
//! extrinsic
//! r11 r12 r13 t1
//! r21 r22 r23 t2
//! r31 r32 r33 t3
//! 0 0 0 1
//!
//! intrinsic
//! fx sk cx
//! 0  fy cy
//! 0  0  1
//!
//! depth_min depth_interval
//! ```
//!
//! Values are written in scientific notation at nine significant
//! digits, so a parse → write cycle is byte-stable. Image dimensions
//! are not part of the file; they come from the accompanying image.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraView;

/// Parsed contents of one camera file: calibration plus the scene's
/// depth sweep range expressed as a start and per-plane interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub depth_min: f64,
    pub depth_interval: f64,
}

impl CameraRecord {
    /// Pair the calibration with an image size, validating the result.
    pub fn into_view(self, image_size: (u32, u32)) -> Result<CameraView> {
        CameraView::new(self.intrinsics, self.rotation, self.translation, image_size)
    }

    /// Build a record from a validated view and a depth sweep range.
    pub fn from_view(view: &CameraView, depth_min: f64, depth_interval: f64) -> Self {
        Self {
            intrinsics: view.intrinsics,
            rotation: view.rotation,
            translation: view.translation,
            depth_min,
            depth_interval,
        }
    }

    /// Farthest sweep depth for a given plane count.
    pub fn depth_max(&self, planes: usize) -> f64 {
        self.depth_min + self.depth_interval * (planes.saturating_sub(1)) as f64
    }
}

fn fmt_value(v: f64) -> String {
    // Nine significant digits in scientific notation; f64 parses this
    // back to the same printed value, keeping files write-stable.
    format!("{v:.8e}")
}

/// Serialize a camera record to the text convention.
pub fn camera_to_string(rec: &CameraRecord) -> String {
    let mut out = String::new();
    out.push_str("extrinsic\n");
    for row in 0..3 {
        let line = [
            fmt_value(rec.rotation[(row, 0)]),
            fmt_value(rec.rotation[(row, 1)]),
            fmt_value(rec.rotation[(row, 2)]),
            fmt_value(rec.translation[row]),
        ]
        .join(" ");
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(&format!(
        "{} {} {} {}\n",
        fmt_value(0.0),
        fmt_value(0.0),
        fmt_value(0.0),
        fmt_value(1.0)
    ));
    out.push('\n');
    out.push_str("intrinsic\n");
    for row in 0..3 {
        let line = [
            fmt_value(rec.intrinsics[(row, 0)]),
            fmt_value(rec.intrinsics[(row, 1)]),
            fmt_value(rec.intrinsics[(row, 2)]),
        ]
        .join(" ");
        out.push_str(&line);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&format!(
        "{} {}\n",
        fmt_value(rec.depth_min),
        fmt_value(rec.depth_interval)
    ));
    out
}

/// Parse the text convention.
pub fn camera_from_str(text: &str, origin: &str) -> Result<CameraRecord> {
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<String> {
        tokens
            .next()
            .map(str::to_string)
            .ok_or_else(|| Error::data(format!("{origin}: camera file ended before {what}")))
    };
    let head = next("the extrinsic header")?;
    if head != "extrinsic" {
        return Err(Error::data(format!(
            "{origin}: expected 'extrinsic', found {head:?}"
        )));
    }
    let mut ext = [[0.0f64; 4]; 4];
    for row in &mut ext {
        for v in row.iter_mut() {
            let tok = next("an extrinsic value")?;
            *v = parse_float(&tok, origin)?;
        }
    }
    let bottom_ok = ext[3] == [0.0, 0.0, 0.0, 1.0];
    if !bottom_ok {
        return Err(Error::data(format!(
            "{origin}: extrinsic bottom row must be 0 0 0 1"
        )));
    }
    let head = next("the intrinsic header")?;
    if head != "intrinsic" {
        return Err(Error::data(format!(
            "{origin}: expected 'intrinsic', found {head:?}"
        )));
    }
    let mut intr = [[0.0f64; 3]; 3];
    for row in &mut intr {
        for v in row.iter_mut() {
            let tok = next("an intrinsic value")?;
            *v = parse_float(&tok, origin)?;
        }
    }
    let depth_min = parse_float(&next("depth_min")?, origin)?;
    let depth_interval = parse_float(&next("depth_interval")?, origin)?;
    if let Some(extra) = tokens.next() {
        return Err(Error::data(format!(
            "{origin}: trailing content {extra:?} after depth line"
        )));
    }
    if !(depth_min > 0.0) || !(depth_interval > 0.0) {
        return Err(Error::data(format!(
            "{origin}: depth_min and depth_interval must be positive, got {depth_min} {depth_interval}"
        )));
    }
    let rotation = Matrix3::from_fn(|r, c| ext[r][c]);
    let translation = Vector3::new(ext[0][3], ext[1][3], ext[2][3]);
    let intrinsics = Matrix3::from_fn(|r, c| intr[r][c]);
    Ok(CameraRecord {
        intrinsics,
        rotation,
        translation,
        depth_min,
        depth_interval,
    })
}

fn parse_float(tok: &str, origin: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::data(format!("{origin}: bad float {tok:?} in camera file")))?;
    if !v.is_finite() {
        return Err(Error::data(format!(
            "{origin}: non-finite value in camera file"
        )));
    }
    Ok(v)
}

/// Write a camera record to a file.
pub fn write_camera(path: &Path, rec: &CameraRecord) -> Result<()> {
    std::fs::write(path, camera_to_string(rec)).map_err(|e| Error::io(path, e))
}

/// Read a camera record from a file.
pub fn read_camera(path: &Path) -> Result<CameraRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    camera_from_str(&text, &path.display().to_string())
}
