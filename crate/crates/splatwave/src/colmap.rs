//! Plain-text scene import in the style of COLMAP's text export.
//!
//! Points: one `id x y z` per line; further columns (color, error, track)
//! are ignored. Cameras: one
//! `id qw qx qy qz tx ty tz fx fy cx cy W H image_path` per line, with the
//! world-to-camera pose `X_c = R(q) X_w + t`. Blank lines and lines starting
//! with `#` are skipped.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use splatwave_core::linalg::Vec3;
use splatwave_core::{Camera, Quat, SceneBundle, SceneConfig};

use crate::error::{file_err, IoError, Result};
use crate::imageio;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportedCamera {
    pub id: u32,
    pub camera: Camera,
    pub image_path: PathBuf,
}

fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.trim();
            (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().map(str::to_owned).collect()))
        })
        .collect())
}

fn field<T: FromStr>(path: &Path, line: usize, tokens: &[String], i: usize, what: &str) -> Result<T> {
    tokens
        .get(i)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| IoError::Parse { path: path.to_path_buf(), line, message: format!("bad or missing {what}") })
}

fn finite(path: &Path, line: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IoError::Parse { path: path.to_path_buf(), line, message: "non-finite value".into() })
    }
}

pub fn read_points(path: &Path) -> Result<Vec<(u64, Vec3)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, t) in records(path)? {
        let id: u64 = field(path, line, &t, 0, "point id")?;
        let p: Vec3 = [field(path, line, &t, 1, "x")?, field(path, line, &t, 2, "y")?, field(path, line, &t, 3, "z")?];
        finite(path, line, &p)?;
        if !seen.insert(id) {
            return Err(IoError::Parse { path: path.to_path_buf(), line, message: format!("duplicate point id {id}") });
        }
        out.push((id, p));
    }
    Ok(out)
}

/// Image paths are kept as written; relative ones are resolved by the caller.
pub fn read_cameras(path: &Path) -> Result<Vec<ImportedCamera>> {
    const NAMES: [&str; 11] = ["qw", "qx", "qy", "qz", "tx", "ty", "tz", "fx", "fy", "cx", "cy"];
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, t) in records(path)? {
        let id: u32 = field(path, line, &t, 0, "camera id")?;
        let mut v = [0.0; 11];
        for (k, name) in NAMES.iter().enumerate() {
            v[k] = field(path, line, &t, k + 1, name)?;
        }
        finite(path, line, &v)?;
        let width: usize = field(path, line, &t, 12, "W")?;
        let height: usize = field(path, line, &t, 13, "H")?;
        if t.len() < 15 {
            return Err(IoError::Parse { path: path.to_path_buf(), line, message: "missing image path".into() });
        }
        let q = Quat::new(v[0], v[1], v[2], v[3])
            .map_err(|e| IoError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        let camera = Camera::from_pose(q, [v[4], v[5], v[6]], v[7], v[8], v[9], v[10], width, height);
        camera.validate().map_err(|e| IoError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        if !seen.insert(id) {
            return Err(IoError::Parse { path: path.to_path_buf(), line, message: format!("duplicate camera id {id}") });
        }
        out.push(ImportedCamera { id, camera, image_path: PathBuf::from(t[14..].join(" ")) });
    }
    Ok(out)
}

/// Builds a fresh scene from imported points and cameras. Images are read
/// relative to `image_root`; cameras whose image is absent get no target.
pub fn build_scene(
    points: &[(u64, Vec3)],
    cameras: &[ImportedCamera],
    image_root: &Path,
    config: SceneConfig,
    seed: u64,
) -> Result<SceneBundle> {
    let pts: Vec<Vec3> = points.iter().map(|p| p.1).collect();
    let mut views = Vec::with_capacity(cameras.len());
    for c in cameras {
        let path = image_root.join(&c.image_path);
        let image = if path.is_file() { Some(imageio::read_png(&path)?) } else { None };
        if let Some(img) = &image {
            if (img.width, img.height) != (c.camera.width, c.camera.height) {
                return Err(crate::error::format_err(
                    &path,
                    format!("image is {}x{}, camera {} expects {}x{}", img.width, img.height, c.id, c.camera.width, c.camera.height),
                ));
            }
        }
        views.push((c.id, c.camera.clone(), image));
    }
    Ok(SceneBundle::from_points(&pts, views, config, seed)?)
}
