//! Depth maps with validity masks.
//!
//! A [`DepthMap`] is the object the whole pipeline passes around: a
//! per-pixel depth raster in millimeters plus a boolean validity mask.
//! Invalid pixels always hold the sentinel value `0.0`, which is also
//! how validity is encoded in PFM files (depth 0 cannot occur for a
//! valid pixel since scene depths are strictly positive).

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DepthMap {
    /// Pair a depth raster with an explicit validity mask. Values at
    /// invalid pixels are forced to the sentinel `0.0`; valid pixels
    /// must be finite and strictly positive.
    pub fn new(mut values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::data(format!(
                "depth map shape {:?} does not match mask shape {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        for ((y, x), &ok) in valid.indexed_iter() {
            if ok {
                let v = values[(y, x)];
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::numerical(format!(
                        "depth map has non-positive or non-finite value {v} at valid pixel ({y}, {x})"
                    )));
                }
            } else {
                values[(y, x)] = 0.0;
            }
        }
        Ok(Self { values, valid })
    }

    /// Interpret a raw raster (e.g. read from PFM): finite positive
    /// entries are valid, everything else becomes the sentinel.
    pub fn from_raster(raster: Array2<f64>) -> Self {
        let valid = raster.mapv(|v| v.is_finite() && v > 0.0);
        let values = raster.mapv(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 });
        Self { values, valid }
    }

    /// All-valid constant map.
    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(
            Array2::from_elem((height, width), depth),
            Array2::from_elem((height, width), true),
        )
    }

    /// (height, width).
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Raw raster with `0.0` at invalid pixels — the PFM payload.
    pub fn raster(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.valid
    }

    /// Depth at a pixel, `None` when invalid.
    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        self.valid[(y, x)].then(|| self.values[(y, x)])
    }

    /// Overwrite one pixel with a valid depth.
    pub fn set(&mut self, y: usize, x: usize, depth: f64) -> Result<()> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(Error::numerical(format!(
                "cannot set non-positive depth {depth} at ({y}, {x})"
            )));
        }
        self.values[(y, x)] = depth;
        self.valid[(y, x)] = true;
        Ok(())
    }

    /// Mark one pixel invalid.
    pub fn invalidate(&mut self, y: usize, x: usize) {
        self.values[(y, x)] = 0.0;
        self.valid[(y, x)] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Nearest-neighbor 2x upsampling: each output pixel copies depth
    /// and validity from its source pixel `(y/2, x/2)`.
    pub fn upsample2x(&self) -> DepthMap {
        let (h, w) = self.dim();
        let values = Array2::from_shape_fn((2 * h, 2 * w), |(y, x)| self.values[(y / 2, x / 2)]);
        let valid = Array2::from_shape_fn((2 * h, 2 * w), |(y, x)| self.valid[(y / 2, x / 2)]);
        Self { values, valid }
    }

    /// Nearest-neighbor downsampling by an integer factor, keeping the
    /// top-left sample of each block (the sample whose full-resolution
    /// coordinate is `factor` times the output coordinate).
    pub fn downsample(&self, factor: usize) -> Result<DepthMap> {
        let (h, w) = self.dim();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::data(format!(
                "cannot downsample {h}x{w} depth map by factor {factor}"
            )));
        }
        let values =
            Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
                self.values[(y * factor, x * factor)]
            });
        let valid =
            Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
                self.valid[(y * factor, x * factor)]
            });
        Ok(Self { values, valid })
    }

    /// Verify every valid pixel lies within `[min, max]`.
    pub fn check_range(&self, min: f64, max: f64) -> Result<()> {
        for ((y, x), &ok) in self.valid.indexed_iter() {
            if ok {
                let v = self.values[(y, x)];
                if v < min || v > max {
                    return Err(Error::numerical(format!(
                        "depth {v} at ({y}, {x}) outside [{min}, {max}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean absolute difference over pixels valid in both maps;
    /// `None` when no pixel is valid in both.
    pub fn mean_abs_error(&self, other: &DepthMap) -> Option<f64> {
        assert_eq!(self.dim(), other.dim(), "depth map sizes differ");
        let mut total = 0.0;
        let mut count = 0usize;
        for ((y, x), &ok) in self.valid.indexed_iter() {
            if ok && other.valid[(y, x)] {
                total += (self.values[(y, x)] - other.values[(y, x)]).abs();
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeMap;

    #[test]
    fn invalid_pixels_are_forced_to_sentinel() {
        let values = array![[600.0, 999.0], [425.0, 700.0]];
        let valid = array![[true, false], [true, true]];
        let map = DepthMap::new(values, valid).unwrap();
        assert_eq!(map.raster()[(0, 1)], 0.0);
        assert_eq!(map.get(0, 1), None);
        assert_eq!(map.get(0, 0), Some(600.0));
        assert_eq!(map.valid_count(), 3);
    }

    #[test]
    fn nonpositive_valid_depth_is_rejected() {
        let values = array![[0.0]];
        let valid = array![[true]];
        assert_eq!(DepthMap::new(values, valid).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn raster_roundtrip_recovers_validity() {
        let values = array![[600.0, 0.0], [0.0, 700.0]];
        let map = DepthMap::from_raster(values.clone());
        assert_eq!(map.valid_count(), 2);
        assert_eq!(map.raster(), &values);
    }

    #[test]
    fn upsample_is_block_copy_and_subsample_inverts_it() {
        let map = DepthMap::from_raster(array![[1.0, 2.0], [3.0, 0.0]]);
        let up = map.upsample2x();
        assert_eq!(up.dim(), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.raster()[(y, x)], map.raster()[(y / 2, x / 2)]);
                assert_eq!(up.mask()[(y, x)], map.mask()[(y / 2, x / 2)]);
            }
        }
        let down = up.downsample(2).unwrap();
        assert_eq!(&down, &map);
    }

    #[test]
    fn upsample_multiplies_histogram_by_four() {
        let map = DepthMap::from_raster(array![[5.0, 5.0], [7.0, 9.0]]);
        let up = map.upsample2x();
        let hist = |m: &DepthMap| {
            let mut h: BTreeMap<u64, usize> = BTreeMap::new();
            for v in m.raster().iter() {
                *h.entry(v.to_bits()).or_default() += 1;
            }
            h
        };
        let before = hist(&map);
        let after = hist(&up);
        assert_eq!(before.len(), after.len());
        for (bits, count) in before {
            assert_eq!(after[&bits], count * 4);
        }
    }

    #[test]
    fn range_check_flags_outliers() {
        let map = DepthMap::from_raster(array![[425.0, 921.0]]);
        map.check_range(425.0, 921.0).unwrap();
        assert!(map.check_range(426.0, 921.0).is_err());
    }

    #[test]
    fn mean_abs_error_uses_joint_validity() {
        let a = DepthMap::from_raster(array![[600.0, 0.0], [500.0, 700.0]]);
        let b = DepthMap::from_raster(array![[604.0, 100.0], [0.0, 706.0]]);
        // Joint-valid pixels: (0,0) err 4, (1,1) err 6.
        assert_eq!(a.mean_abs_error(&b), Some(5.0));
        let empty = DepthMap::from_raster(array![[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(a.mean_abs_error(&empty), None);
    }
}
