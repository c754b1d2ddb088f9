//! Procedural test scenes.
//!
//! Colored Gaussians clustered around anchors on the `z = 0` plane, seen by
//! cameras on a ring. Ground truth is rendered by [`crate::raster`] and then
//! multiplied by a per-view RGB tint and a radial vignette, so each view has
//! an appearance the shared model cannot explain without its per-view
//! tensors.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::HrfnParams;
use crate::linalg::Vec3;
use crate::raster::{self, RenderOptions};
use crate::scene::{Anchor, Camera, CameraView, Gaussian, Quat, SceneBundle, SceneConfig, APPEARANCE_INIT_STD};
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 10 anchors × 10 Gaussians, 8 training and 2 held-out 64×64 views.
    Tiny,
    /// 40 anchors × 10 Gaussians, 12 training and 4 held-out 96×96 views.
    Medium,
}

impl core::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "medium" => Ok(Preset::Medium),
            other => Err(crate::error::invalid!("unknown preset {other:?} (expected tiny or medium)")),
        }
    }
}

/// Shape parameters of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub anchors: usize,
    pub gaussians_per_anchor: usize,
    pub train_views: usize,
    pub heldout_views: usize,
    pub image_size: usize,
    pub focal: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    /// Anchors lie within this distance of the origin.
    pub spread: f64,
    pub voxel_size: f64,
    /// Per-channel tint range around 1.
    pub tint: f64,
    /// Vignette strength range: darkening at the image corners.
    pub vignette: (f64, f64),
    /// Opacity every trainable Gaussian starts from.
    pub initial_opacity: f64,
}

impl Preset {
    pub fn spec(self) -> SyntheticSpec {
        let base = SyntheticSpec {
            anchors: 10,
            gaussians_per_anchor: 10,
            train_views: 8,
            heldout_views: 2,
            image_size: 64,
            focal: 110.0,
            ring_radius: 3.0,
            ring_height: 2.0,
            spread: 1.0,
            voxel_size: 0.35,
            tint: 0.25,
            vignette: (0.25, 0.5),
            initial_opacity: 0.5,
        };
        match self {
            Preset::Tiny => base,
            Preset::Medium => SyntheticSpec {
                anchors: 40,
                train_views: 12,
                heldout_views: 4,
                image_size: 96,
                focal: 100.0,
                spread: 1.4,
                ..base
            },
        }
    }
}

/// A generated scene: the trainable bundle (ground-truth images attached to
/// every view) plus everything used to produce the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bundle: SceneBundle,
    pub truth: Vec<Gaussian>,
    pub train_views: Vec<u32>,
    pub heldout_views: Vec<u32>,
    pub tints: Vec<Vec3>,
    pub vignettes: Vec<f64>,
}

/// Multiplies `img` by `tint` and `1 − strength·r²`, with `r` the distance
/// to the image center normalized to 1 at the corners.
pub fn apply_appearance(img: &mut Image, tint: Vec3, strength: f64) {
    let (cx, cy) = ((img.width as f64 - 1.0) / 2.0, (img.height as f64 - 1.0) / 2.0);
    let r2max = cx * cx + cy * cy;
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let v = 1.0 - strength * (dx * dx + dy * dy) / r2max.max(f64::MIN_POSITIVE);
            let p = img.pixel(x, y);
            img.set_pixel(x, y, [p[0] * tint[0] * v, p[1] * tint[1] * v, p[2] * tint[2] * v]);
        }
    }
}

pub fn generate(preset: Preset, seed: u64) -> Result<SyntheticScene> {
    generate_with(&preset.spec(), seed)
}

pub fn generate_with(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    let config = SceneConfig {
        gaussians_per_anchor: spec.gaussians_per_anchor,
        voxel_size: spec.voxel_size,
        ..SceneConfig::default()
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = Vec::with_capacity(spec.anchors);
    let mut truth = Vec::with_capacity(spec.anchors * spec.gaussians_per_anchor);
    for _ in 0..spec.anchors {
        let r = spec.spread * libm::sqrt(rng.random_range(0.0..1.0));
        let phi = rng.random_range(0.0..2.0 * PI);
        let center = [r * libm::cos(phi), r * libm::sin(phi), rng.random_range(0.0..0.2)];
        let feature = crate::scene::normal_vec(&mut rng, config.intrinsic_dim, APPEARANCE_INIT_STD);
        let mut anchor = Anchor::new(center, &config, spec.initial_opacity, feature);
        let base_color: Vec3 = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        for j in 0..spec.gaussians_per_anchor {
            anchor.offsets[j] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)];
            anchor.scales[j] = [rng.random_range(0.08..0.22), rng.random_range(0.08..0.22), rng.random_range(0.03..0.08)];
            let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            anchor.rotations[j] = Quat::from_axis_angle(axis, rng.random_range(0.0..PI)).unwrap_or(Quat::IDENTITY);
        }
        for (j, mean) in anchor.gaussian_positions().into_iter().enumerate() {
            let jitter = |rng: &mut ChaCha8Rng, c: f64| (c + rng.random_range(-0.2..0.2)).clamp(0.05, 0.8);
            truth.push(Gaussian::new(
                mean,
                anchor.rotations[j],
                anchor.scales[j],
                rng.random_range(0.6..0.95),
                [jitter(&mut rng, base_color[0]), jitter(&mut rng, base_color[1]), jitter(&mut rng, base_color[2])],
            )?);
        }
        anchors.push(anchor);
    }

    let total = spec.train_views + spec.heldout_views;
    // Held-out views are spread evenly among the training views.
    let heldout: Vec<usize> = (0..spec.heldout_views).map(|h| (2 * h + 1) * total / (2 * spec.heldout_views.max(1))).collect();
    let mut views = Vec::with_capacity(total);
    let (mut train_views, mut heldout_views, mut tints, mut vignettes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let phase = rng.random_range(0.0..2.0 * PI);
    for i in 0..total {
        let angle = phase + 2.0 * PI * i as f64 / total as f64;
        let eye = [spec.ring_radius * libm::cos(angle), spec.ring_radius * libm::sin(angle), spec.ring_height];
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], spec.focal, spec.image_size, spec.image_size);
        let mut img = raster::render_gaussians(&truth, &cam, RenderOptions::default())?.image;
        let tint = [
            1.0 + rng.random_range(-spec.tint..=spec.tint),
            1.0 + rng.random_range(-spec.tint..=spec.tint),
            1.0 + rng.random_range(-spec.tint..=spec.tint),
        ];
        let strength = rng.random_range(spec.vignette.0..=spec.vignette.1);
        apply_appearance(&mut img, tint, strength);
        let id = i as u32;
        if heldout.contains(&i) {
            heldout_views.push(id);
        } else {
            train_views.push(id);
        }
        tints.push(tint);
        vignettes.push(strength);
        views.push(CameraView::new(id, cam, Some(img), &config, seed));
    }
    let fusion = HrfnParams::new(&config, seed.wrapping_add(1))?;
    let bundle = SceneBundle { config, anchors, views, fusion };
    bundle.validate()?;
    Ok(SyntheticScene { bundle, truth, train_views, heldout_views, tints, vignettes })
}
