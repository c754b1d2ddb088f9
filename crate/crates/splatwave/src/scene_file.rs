//! On-disk scenes: a JSON manifest next to a flat tensor file.
//!
//! `scene.json` holds the configuration, cameras, fusion layer shapes, the
//! optional train/held-out split and a table of named tensors. `scene.bin`
//! starts with the 8 ASCII bytes `SMWS0001` followed by every tensor as
//! little-endian `f32`, concatenated in table order. Each table entry gives
//! `name`, `shape` and `offset`, the element index of its first value after
//! the header.
//!
//! Tensors are written in this order (`N` anchors, `k` Gaussians and `k_s`
//! frustum samples per anchor, `W` sub-band weights over all levels):
//!
//! | name | shape |
//! |------|-------|
//! | `anchor.center` | `N × 3` |
//! | `anchor.voxel_scale` | `N × 3` |
//! | `anchor.offsets` | `N × k × 3` |
//! | `anchor.feature` | `N × n_v` |
//! | `anchor.narrow_offsets` | `N × k_s × 2` |
//! | `anchor.broad_scales` | `N × k_s × 2` |
//! | `anchor.narrow_weights` | `N × W` |
//! | `anchor.broad_weights` | `N × W` |
//! | `anchor.opacities` | `N × k` |
//! | `anchor.scales` | `N × k × 3` |
//! | `anchor.rotations` | `N × k × 4` (w, x, y, z) |
//! | `fusion.layers` | weights then bias of each layer, row-major `out × in` |
//! | `fusion.gains` | `2` (ω_r, ω_v) |
//! | `view.<id>.global` | `n_g` |
//! | `view.<id>.feature_map` | `n_r × H^F × W^F` |
//! | `view.<id>.image` | `H × W × 3`, only for views with an image |
//!
//! Values pass through `f32`, so a reloaded scene matches the saved one to
//! single precision.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatwave_core::fusion::{HrfnParams, Linear};
use splatwave_core::{Anchor, Camera, CameraView, Image, Quat, SceneBundle, SceneConfig, Tensor3};

use crate::error::{file_err, format_err, IoError, Result};

pub const MAGIC: &[u8; 8] = b"SMWS0001";
pub const MANIFEST_NAME: &str = "scene.json";
pub const TENSORS_NAME: &str = "scene.bin";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub id: u32,
    pub camera: Camera,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayout {
    pub stage_lengths: [usize; 4],
    /// `(inputs, outputs)` per layer.
    pub layers: Vec<(usize, usize)>,
    pub pe_frequencies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SceneConfig,
    pub tensor_file: String,
    pub anchors: usize,
    pub fusion: FusionLayout,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
    pub tensors: Vec<TensorEntry>,
}

/// A scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub bundle: SceneBundle,
    pub splits: Option<Splits>,
}

/// Resolves a scene argument: a directory means its `scene.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

struct Table {
    entries: Vec<TensorEntry>,
    values: Vec<f32>,
}

impl Table {
    fn push(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) {
        let offset = self.values.len();
        self.values.extend(values.into_iter().map(|v| v as f32));
        debug_assert_eq!(self.values.len() - offset, shape.iter().product::<usize>());
        self.entries.push(TensorEntry { name, shape, offset });
    }
}

fn weight_count(config: &SceneConfig) -> usize {
    (1..=config.wavelet_levels).map(|m| config.subband_count(m)).sum()
}

/// Writes `dir/scene.json` and `dir/scene.bin`, creating `dir` if needed.
pub fn save(dir: &Path, bundle: &SceneBundle, splits: Option<&Splits>) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let c = &bundle.config;
    let (n, k, ks) = (bundle.anchors.len(), c.gaussians_per_anchor, c.frustum_samples);
    let a = &bundle.anchors;
    let mut t = Table { entries: Vec::new(), values: Vec::new() };
    t.push("anchor.center".into(), vec![n, 3], a.iter().flat_map(|a| a.center));
    t.push("anchor.voxel_scale".into(), vec![n, 3], a.iter().flat_map(|a| a.voxel_scale));
    t.push("anchor.offsets".into(), vec![n, k, 3], a.iter().flat_map(|a| a.offsets.iter().flatten().copied()));
    t.push("anchor.feature".into(), vec![n, c.intrinsic_dim], a.iter().flat_map(|a| a.feature.iter().copied()));
    t.push("anchor.narrow_offsets".into(), vec![n, ks, 2], a.iter().flat_map(|a| a.narrow_offsets.iter().flatten().copied()));
    t.push("anchor.broad_scales".into(), vec![n, ks, 2], a.iter().flat_map(|a| a.broad_scales.iter().flatten().copied()));
    let w = weight_count(c);
    t.push("anchor.narrow_weights".into(), vec![n, w], a.iter().flat_map(|a| a.narrow_weights.iter().flatten().copied()));
    t.push("anchor.broad_weights".into(), vec![n, w], a.iter().flat_map(|a| a.broad_weights.iter().flatten().copied()));
    t.push("anchor.opacities".into(), vec![n, k], a.iter().flat_map(|a| a.opacities.iter().copied()));
    t.push("anchor.scales".into(), vec![n, k, 3], a.iter().flat_map(|a| a.scales.iter().flatten().copied()));
    t.push("anchor.rotations".into(), vec![n, k, 4], a.iter().flat_map(|a| a.rotations.iter().flat_map(|q| q.to_array())));
    let layers = bundle.fusion.flatten_layers();
    t.push("fusion.layers".into(), vec![layers.len()], layers);
    t.push("fusion.gains".into(), vec![2], [bundle.fusion.omega_r, bundle.fusion.omega_v]);
    for v in &bundle.views {
        t.push(format!("view.{}.global", v.id), vec![v.global_feature.len()], v.global_feature.iter().copied());
        let fm = &v.feature_map;
        t.push(format!("view.{}.feature_map", v.id), vec![fm.channels, fm.height, fm.width], fm.data.iter().copied());
        if let Some(img) = &v.image {
            t.push(format!("view.{}.image", v.id), vec![img.height, img.width, 3], img.data.iter().copied());
        }
    }

    let manifest = Manifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        config: c.clone(),
        tensor_file: TENSORS_NAME.into(),
        anchors: n,
        fusion: FusionLayout {
            stage_lengths: bundle.fusion.stage_lengths,
            layers: bundle.fusion.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
            pe_frequencies: bundle.fusion.pe_frequencies,
        },
        views: bundle.views.iter().map(|v| ViewEntry { id: v.id, camera: v.camera.clone(), has_image: v.image.is_some() }).collect(),
        splits: splits.cloned(),
        tensors: t.entries,
    };
    let mut blob = Vec::with_capacity(MAGIC.len() + 4 * t.values.len());
    blob.extend_from_slice(MAGIC);
    for v in &t.values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bin = dir.join(TENSORS_NAME);
    fs::write(&bin, blob).map_err(file_err(&bin))?;
    let json = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| IoError::Json { path: json.clone(), source })?;
    fs::write(&json, text).map_err(file_err(&json))
}

struct Reader<'a> {
    path: &'a Path,
    index: HashMap<&'a str, &'a TensorEntry>,
    values: Vec<f64>,
}

impl Reader<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let e = self.index.get(name).ok_or_else(|| format_err(self.path, format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(format_err(self.path, format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        let len: usize = shape.iter().product();
        self.values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| format_err(self.path, format!("tensor {name} runs past the end of the file")))
    }
}

fn vec3s(values: &[f64]) -> Vec<[f64; 3]> {
    values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn vec2s(values: &[f64]) -> Vec<[f64; 2]> {
    values.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Loads a scene from its manifest or the directory holding it.
pub fn load(path: &Path) -> Result<SceneFile> {
    let json = manifest_path(path);
    let text = fs::read_to_string(&json).map_err(file_err(&json))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| IoError::Json { path: json.clone(), source })?;
    if m.format.as_bytes() != MAGIC {
        return Err(format_err(&json, format!("unsupported format {:?}", m.format)));
    }
    let bin = json.parent().unwrap_or(Path::new(".")).join(&m.tensor_file);
    let bytes = fs::read(&bin).map_err(file_err(&bin))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(&bin, "missing SMWS0001 header"));
    }
    let body = &bytes[MAGIC.len()..];
    if body.len() % 4 != 0 {
        return Err(format_err(&bin, "length is not a whole number of f32 values"));
    }
    let values = body.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    let r = Reader { path: &bin, index: m.tensors.iter().map(|e| (e.name.as_str(), e)).collect(), values };

    let c = &m.config;
    let (n, k, ks, w) = (m.anchors, c.gaussians_per_anchor, c.frustum_samples, weight_count(c));
    let center = r.get("anchor.center", &[n, 3])?;
    let voxel = r.get("anchor.voxel_scale", &[n, 3])?;
    let offsets = r.get("anchor.offsets", &[n, k, 3])?;
    let feature = r.get("anchor.feature", &[n, c.intrinsic_dim])?;
    let nc = r.get("anchor.narrow_offsets", &[n, ks, 2])?;
    let bc = r.get("anchor.broad_scales", &[n, ks, 2])?;
    let nw = r.get("anchor.narrow_weights", &[n, w])?;
    let bw = r.get("anchor.broad_weights", &[n, w])?;
    let opacities = r.get("anchor.opacities", &[n, k])?;
    let scales = r.get("anchor.scales", &[n, k, 3])?;
    let rotations = r.get("anchor.rotations", &[n, k, 4])?;
    let split_levels = |flat: &[f64]| -> Vec<Vec<f64>> {
        let mut at = 0;
        (1..=c.wavelet_levels)
            .map(|lvl| {
                let len = c.subband_count(lvl);
                at += len;
                flat[at - len..at].to_vec()
            })
            .collect()
    };
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let rot = rotations[i * k * 4..(i + 1) * k * 4]
            .chunks_exact(4)
            .map(|q| Quat::new(q[0], q[1], q[2], q[3]))
            .collect::<splatwave_core::Result<Vec<_>>>()?;
        anchors.push(Anchor {
            center: vec3s(&center[i * 3..i * 3 + 3])[0],
            voxel_scale: vec3s(&voxel[i * 3..i * 3 + 3])[0],
            offsets: vec3s(&offsets[i * k * 3..(i + 1) * k * 3]),
            feature: feature[i * c.intrinsic_dim..(i + 1) * c.intrinsic_dim].to_vec(),
            narrow_offsets: vec2s(&nc[i * ks * 2..(i + 1) * ks * 2]),
            broad_scales: vec2s(&bc[i * ks * 2..(i + 1) * ks * 2]),
            narrow_weights: split_levels(&nw[i * w..(i + 1) * w]),
            broad_weights: split_levels(&bw[i * w..(i + 1) * w]),
            opacities: opacities[i * k..(i + 1) * k].to_vec(),
            scales: vec3s(&scales[i * k * 3..(i + 1) * k * 3]),
            rotations: rot,
        });
    }

    let layers: Vec<Linear> = m
        .fusion
        .layers
        .iter()
        .map(|&(inputs, outputs)| Linear { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] })
        .collect();
    let total: usize = layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
    let mut fusion = HrfnParams { layers, stage_lengths: m.fusion.stage_lengths, omega_r: 0.0, omega_v: 0.0, pe_frequencies: m.fusion.pe_frequencies };
    fusion.unflatten_layers(r.get("fusion.layers", &[total])?);
    let gains = r.get("fusion.gains", &[2])?;
    (fusion.omega_r, fusion.omega_v) = (gains[0], gains[1]);

    let mut views = Vec::with_capacity(m.views.len());
    for v in &m.views {
        let global = r.get(&format!("view.{}.global", v.id), &[c.global_dim])?.to_vec();
        let name = format!("view.{}.feature_map", v.id);
        let shape = r.index.get(name.as_str()).map(|e| e.shape.clone()).unwrap_or_default();
        if shape.len() != 3 {
            return Err(format_err(&bin, format!("tensor {name} must have 3 dimensions")));
        }
        let feature_map = Tensor3::from_vec(shape[0], shape[1], shape[2], r.get(&name, &shape)?.to_vec())?;
        let image = if v.has_image {
            let (h, wd) = (v.camera.height, v.camera.width);
            Some(Image::from_vec(wd, h, r.get(&format!("view.{}.image", v.id), &[h, wd, 3])?.to_vec())?)
        } else {
            None
        };
        views.push(CameraView { id: v.id, camera: v.camera.clone(), image, global_feature: global, feature_map });
    }
    let bundle = SceneBundle { config: m.config, anchors, views, fusion };
    bundle.validate()?;
    Ok(SceneFile { bundle, splits: m.splits })
}
