//! On-disk scene layout.
//!
//! A dataset root holds numbered scene directories, each with one
//! subdirectory per artifact kind and zero-padded per-view file stems:
//!
//! ```text
//! root/
//!   scene_0000/
//!     images/00000000.png
//!     cams/00000000_cam.txt
//!     depths/00000000.pfm      (ground-truth depth, when available)
//!     gt_cloud.ply             (ground-truth surface samples)
//!   scene_0001/
//!     ...
//! ```
//!
//! This module only knows names and enumeration; the scene generator
//! and pipeline stages decide what to read or write.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Directory name of scene `index`.
pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// File stem of view `index` (extension added per artifact).
pub fn view_stem(index: usize) -> String {
    format!("{index:08}")
}

/// Resolved paths inside one scene directory.
#[derive(Debug, Clone)]
pub struct ScenePaths {
    pub root: PathBuf,
}

impl ScenePaths {
    pub fn new(scene_dir: impl Into<PathBuf>) -> Self {
        Self {
            root: scene_dir.into(),
        }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn cams_dir(&self) -> PathBuf {
        self.root.join("cams")
    }

    pub fn depths_dir(&self) -> PathBuf {
        self.root.join("depths")
    }

    pub fn image(&self, view: usize) -> PathBuf {
        self.images_dir().join(format!("{}.png", view_stem(view)))
    }

    pub fn camera(&self, view: usize) -> PathBuf {
        self.cams_dir().join(format!("{}_cam.txt", view_stem(view)))
    }

    pub fn gt_depth(&self, view: usize) -> PathBuf {
        self.depths_dir().join(format!("{}.pfm", view_stem(view)))
    }

    pub fn gt_cloud(&self) -> PathBuf {
        self.root.join("gt_cloud.ply")
    }

    /// Number of views, counted from the camera files present.
    pub fn count_views(&self) -> Result<usize> {
        let mut count = 0;
        while self.camera(count).is_file() {
            count += 1;
        }
        if count == 0 {
            return Err(Error::data(format!(
                "{}: no camera files found (expected cams/00000000_cam.txt ...)",
                self.root.display()
            )));
        }
        Ok(count)
    }
}

/// Enumerate scene directories under a dataset root, ordered by index.
pub fn list_scenes(root: &Path) -> Result<Vec<ScenePaths>> {
    let mut scenes = Vec::new();
    while root.join(scene_dir_name(scenes.len())).is_dir() {
        scenes.push(ScenePaths::new(root.join(scene_dir_name(scenes.len()))));
    }
    if scenes.is_empty() {
        return Err(Error::data(format!(
            "{}: no scene directories found (expected scene_0000, ...)",
            root.display()
        )));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn names_are_zero_padded() {
        assert_eq!(scene_dir_name(0), "scene_0000");
        assert_eq!(scene_dir_name(123), "scene_0123");
        assert_eq!(view_stem(7), "00000007");
    }

    #[test]
    fn enumeration_is_dense_and_ordered() {
        let dir = tempdir().unwrap();
        for i in 0..3 {
            std::fs::create_dir(dir.path().join(scene_dir_name(i))).unwrap();
        }
        // A gap stops the scan: scene_0004 without scene_0003 is not
        // reachable, keeping indices dense.
        std::fs::create_dir(dir.path().join(scene_dir_name(4))).unwrap();
        let scenes = list_scenes(dir.path()).unwrap();
        assert_eq!(scenes.len(), 3);
        assert!(scenes[2].root.ends_with("scene_0002"));
    }

    #[test]
    fn empty_root_is_a_data_error() {
        let dir = tempdir().unwrap();
        assert_eq!(list_scenes(dir.path()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn view_counting_requires_cameras() {
        let dir = tempdir().unwrap();
        let scene = ScenePaths::new(dir.path().join("scene_0000"));
        std::fs::create_dir_all(scene.cams_dir()).unwrap();
        assert_eq!(scene.count_views().unwrap_err().exit_code(), 3);
        std::fs::write(scene.camera(0), "x").unwrap();
        std::fs::write(scene.camera(1), "x").unwrap();
        assert_eq!(scene.count_views().unwrap(), 2);
    }
}
