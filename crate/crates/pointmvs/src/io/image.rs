//! PNG reading and writing for images and region masks.
//!
//! Rendered images travel as 8-bit RGB PNG and are exposed to the
//! pipeline as `[H, W, 3]` arrays in `[0, 1]`. Region-of-interest
//! masks are 8-bit grayscale PNG where any nonzero pixel means
//! "refine here".

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Write an RGB image; values are clamped to `[0, 1]` and quantized
/// to 8 bits.
pub fn write_image(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (h, w, c) = data.dim();
    if c != 3 {
        return Err(Error::data(format!(
            "{}: image array must be [H, W, 3], got {c} channels",
            path.display()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                px.0[ch] = (data[(y, x, ch)].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: PNG encode failed: {e}", path.display())))
}

/// Read an RGB image into `[H, W, 3]` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(format!("{}: PNG decode failed: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for ch in 0..3 {
                data[(y as usize, x as usize, ch)] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(data)
}

/// Write a refine-region mask as 8-bit grayscale PNG (255 = refine).
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.get_pixel_mut(x as u32, y as u32).0[0] = if mask[(y, x)] { 255 } else { 0 };
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: PNG encode failed: {e}", path.display())))
}

/// Read a mask; any nonzero pixel counts as "refine".
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(format!("{}: PNG decode failed: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0] != 0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn image_roundtrip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data = Array3::from_shape_fn((6, 9, 3), |(y, x, c)| {
            ((y * 13 + x * 5 + c * 113) % 256) as f64 / 255.0
        });
        write_image(&path, &data).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dim(), (6, 9, 3));
        for (a, b) in data.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn values_exactly_representable_survive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("exact.png");
        let data = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            ((y * 2 + x + c) % 2) as f64 // 0.0 or 1.0
        });
        write_image(&path, &data).unwrap();
        assert_eq!(read_image(&path).unwrap(), data);
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((5, 7), |(y, x)| (y + x) % 3 == 0);
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clamp.png");
        let mut data = Array3::zeros((1, 2, 3));
        data[(0, 0, 0)] = -0.5;
        data[(0, 1, 0)] = 1.5;
        write_image(&path, &data).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back[(0, 0, 0)], 0.0);
        assert_eq!(back[(0, 1, 0)], 1.0);
    }

    #[test]
    fn non_three_channel_array_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let data = Array3::<f64>::zeros((2, 2, 4));
        assert_eq!(write_image(&path, &data).unwrap_err().exit_code(), 3);
    }
}
