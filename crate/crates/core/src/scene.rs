//! Scene primitives: Gaussians, anchors, pinhole cameras and the bundle that
//! ties them to a shared configuration.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Error, Result};
use crate::fusion::HrfnParams;
use crate::linalg::{self, Mat3, Vec2, Vec3};
use crate::tensor::{Image, Tensor3};

/// Scales at or below this are rejected as degenerate.
pub const SCALE_FLOOR: f64 = 1e-8;
/// Points at or closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
const UNIT_TOLERANCE: f64 = 1e-9;
/// Standard deviation of the seeded initialization of per-view appearance tensors.
pub const APPEARANCE_INIT_STD: f64 = 0.01;

/// Unit quaternion in `(w, x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat([f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    /// Normalizes `(w, x, y, z)`. Fails on the zero quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = libm::sqrt(w * w + x * x + y * y + z * z);
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid!("quaternion ({w}, {x}, {y}, {z}) cannot be normalized"));
        }
        Ok(Quat([w / n, x / n, y / n, z / n]))
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let a = linalg::normalize(axis);
        let (s, c) = (libm::sin(angle / 2.0), libm::cos(angle / 2.0));
        Quat::new(c, a[0] * s, a[1] * s, a[2] * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        self.0
    }

    pub fn to_matrix(self) -> Mat3 {
        rotation_matrix(self.0)
    }
}

impl TryFrom<[f64; 4]> for Quat {
    type Error = Error;

    fn try_from(q: [f64; 4]) -> Result<Self> {
        Quat::new(q[0], q[1], q[2], q[3])
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        q.0
    }
}

fn rotation_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Σ = R S Sᵀ Rᵀ for a unit quaternion `q = (w, x, y, z)` and scale `s`.
pub fn build_covariance(q: [f64; 4], s: Vec3) -> Result<Mat3> {
    let n = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    if libm::fabs(n - 1.0) > UNIT_TOLERANCE {
        return Err(invalid!("quaternion norm {n} is not 1"));
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid!("scale {s:?} must be strictly positive"));
    }
    let r = rotation_matrix(q);
    let mut sigma = [[0.0; 3]; 3];
    for (i, row) in sigma.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
        }
    }
    Ok(sigma)
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian {
    pub fn new(mean: Vec3, rotation: Quat, scale: Vec3, opacity: f64, color: Vec3) -> Result<Self> {
        if scale.iter().any(|s| !(*s > SCALE_FLOOR)) {
            return Err(Error::DegenerateCovariance);
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(invalid!("opacity {opacity} outside [0, 1]"));
        }
        Ok(Self { mean, rotation, scale, opacity, color })
    }

    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation.to_matrix();
        let s = self.scale;
        let mut sigma = [[0.0; 3]; 3];
        for (i, row) in sigma.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
            }
        }
        sigma
    }
}

/// exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ)), evaluated in the Gaussian's principal frame.
pub fn gaussian_density(g: &Gaussian, x: Vec3) -> Result<f64> {
    if g.scale.iter().any(|s| !(*s > SCALE_FLOOR)) {
        return Err(Error::DegenerateCovariance);
    }
    let r = g.rotation.to_matrix();
    let local = linalg::mat_t_vec(&r, linalg::sub(x, g.mean));
    let maha: f64 = (0..3).map(|k| (local[k] / g.scale[k]) * (local[k] / g.scale[k])).sum();
    Ok(libm::exp(-0.5 * maha))
}

/// Global hyperparameters shared by every anchor and view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Gaussians spawned per anchor.
    pub gaussians_per_anchor: usize,
    /// Narrow and broad samples per anchor.
    pub frustum_samples: usize,
    /// Highest DWT level of the feature pyramid.
    pub wavelet_levels: usize,
    pub intrinsic_dim: usize,
    pub refined_dim: usize,
    pub global_dim: usize,
    /// Sinusoid octaves of the positional encoding.
    pub pe_frequencies: usize,
    /// Narrow frustum radius in feature-map pixels.
    pub narrow_radius: f64,
    /// Broad frustum radius times distance, in feature-map pixels × world units.
    pub broad_radius_max: f64,
    /// Image pixels per feature-map pixel.
    pub feature_stride: usize,
    /// Anchor voxel edge length, used for `l_v` and voxelization.
    pub voxel_size: f64,
    pub lambda_ssim: f64,
    pub lambda_l1: f64,
    pub lambda_proj: f64,
    pub lambda_vol: f64,
    /// Stage-1 supervision threshold factor, τ = κ·c̄.
    pub kappa: f64,
    /// Stage-2 dissimilarity threshold.
    pub eta: f64,
    /// Iterations between block rotations.
    pub rotation_period: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            gaussians_per_anchor: 10,
            frustum_samples: 1,
            wavelet_levels: 1,
            intrinsic_dim: 48,
            refined_dim: 32,
            global_dim: 16,
            pe_frequencies: 4,
            narrow_radius: 2.0,
            broad_radius_max: 32.0,
            feature_stride: 4,
            voxel_size: 0.1,
            lambda_ssim: 0.2,
            lambda_l1: 0.8,
            lambda_proj: 0.01,
            lambda_vol: 0.01,
            kappa: 0.5,
            eta: 0.01,
            rotation_period: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let parts = 2 * self.wavelet_levels + 2;
        if self.gaussians_per_anchor == 0 || self.frustum_samples == 0 {
            return Err(config_err!("k and k_s must be positive"));
        }
        if self.refined_dim == 0 || !self.refined_dim.is_multiple_of(parts) {
            return Err(config_err!("refined_dim {} not divisible by 2M+2 = {parts}", self.refined_dim));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(config_err!("kappa {} outside (0, 1)", self.kappa));
        }
        if self.feature_stride == 0 || self.rotation_period == 0 {
            return Err(config_err!("feature_stride and rotation_period must be positive"));
        }
        if !(self.voxel_size > 0.0) || !(self.narrow_radius >= 0.0) || !(self.broad_radius_max >= 0.0) {
            return Err(config_err!("voxel size and frustum radii must be nonnegative"));
        }
        Ok(())
    }

    /// Sub-band weights per level `m ∈ [1, M]`: `4^m` each.
    pub fn subband_count(&self, level: usize) -> usize {
        1 << (2 * level)
    }
}

/// Voxel-centered point spawning `k` Gaussians, with its sampling parameters.
///
/// Per-Gaussian opacity, scale and rotation are direct parameters of the
/// anchor; only colors come from the fusion network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub center: Vec3,
    /// `l_v`, multiplies the unitless offsets.
    pub voxel_scale: Vec3,
    pub offsets: Vec<Vec3>,
    /// Intrinsic feature `f_v`.
    pub feature: Vec<f64>,
    /// Narrow jitter `nc`, one per frustum sample, in feature-map pixels.
    pub narrow_offsets: Vec<Vec2>,
    /// Broad scaling factors `bc`, one per frustum sample.
    pub broad_scales: Vec<Vec2>,
    /// `ω^n_{m,·}` for levels `1..=M`.
    pub narrow_weights: Vec<Vec<f64>>,
    /// `ω^b_{m,·}` for levels `1..=M`.
    pub broad_weights: Vec<Vec<f64>>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
}

impl Anchor {
    /// Fresh anchor: zero offsets, `l_v` from the voxel size, `nc = 0`,
    /// `bc = 1`, uniform sub-band weights, scale = voxel size.
    pub fn new(center: Vec3, config: &SceneConfig, opacity: f64, feature: Vec<f64>) -> Self {
        let k = config.gaussians_per_anchor;
        let ks = config.frustum_samples;
        let weights: Vec<Vec<f64>> = (1..=config.wavelet_levels)
            .map(|m| {
                let n = config.subband_count(m);
                vec![1.0 / n as f64; n]
            })
            .collect();
        Self {
            center,
            voxel_scale: [config.voxel_size; 3],
            offsets: vec![[0.0; 3]; k],
            feature,
            narrow_offsets: vec![[0.0; 2]; ks],
            broad_scales: vec![[1.0; 2]; ks],
            narrow_weights: weights.clone(),
            broad_weights: weights,
            opacities: vec![opacity; k],
            scales: vec![[config.voxel_size; 3]; k],
            rotations: vec![Quat::IDENTITY; k],
        }
    }

    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        let k = config.gaussians_per_anchor;
        let ks = config.frustum_samples;
        if self.offsets.len() != k || self.opacities.len() != k || self.scales.len() != k || self.rotations.len() != k {
            return Err(config_err!("anchor must carry exactly k = {k} offsets, opacities, scales and rotations"));
        }
        if self.narrow_offsets.len() != ks || self.broad_scales.len() != ks {
            return Err(config_err!("anchor must carry exactly k_s = {ks} nc/bc samples"));
        }
        if self.feature.len() != config.intrinsic_dim {
            return Err(config_err!("intrinsic feature has {} entries, expected {}", self.feature.len(), config.intrinsic_dim));
        }
        for weights in [&self.narrow_weights, &self.broad_weights] {
            if weights.len() != config.wavelet_levels {
                return Err(config_err!("sub-band weights cover {} levels, expected {}", weights.len(), config.wavelet_levels));
            }
            for (i, w) in weights.iter().enumerate() {
                if w.len() != config.subband_count(i + 1) {
                    return Err(config_err!("level {} weights must have 4^{} entries", i + 1, i + 1));
                }
            }
        }
        if self.scales.iter().flatten().any(|s| !(*s > SCALE_FLOOR)) {
            return Err(Error::DegenerateCovariance);
        }
        Ok(())
    }

    /// Gaussian means `x_i + O_v[j] ⊙ l_v`.
    pub fn gaussian_positions(&self) -> Vec<Vec3> {
        self.offsets
            .iter()
            .map(|o| linalg::add(self.center, linalg::hadamard(*o, self.voxel_scale)))
            .collect()
    }

    /// The anchor's Gaussians with the given colors.
    pub fn gaussians(&self, colors: &[Vec3]) -> Vec<Gaussian> {
        self.gaussian_positions()
            .into_iter()
            .enumerate()
            .map(|(j, mean)| Gaussian {
                mean,
                rotation: self.rotations[j],
                scale: self.scales[j],
                opacity: self.opacities[j],
                color: colors[j],
            })
            .collect()
    }
}

/// Positions of the `k` Gaussians an anchor spawns.
pub fn anchor_to_gaussians(anchor: &Anchor, config: &SceneConfig) -> Result<Vec<Vec3>> {
    anchor.validate(config)?;
    Ok(anchor.gaussian_positions())
}

/// Pinhole camera. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub center: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// From a world-to-camera quaternion and translation, `X_c = R X_w + t`.
    pub fn from_pose(q: Quat, t: Vec3, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let rotation = q.to_matrix();
        let center = linalg::scale(linalg::mat_t_vec(&rotation, t), -1.0);
        Self { rotation, center, fx, fy, cx, cy, width, height }
    }

    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        Self {
            rotation: linalg::look_at(eye, target, up),
            center: eye,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn translation(&self) -> Vec3 {
        linalg::scale(linalg::mat_vec(&self.rotation, self.center), -1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if linalg::orthonormality_error(&self.rotation) > UNIT_TOLERANCE {
            return Err(invalid!("camera rotation is not orthonormal"));
        }
        if self.width == 0 || self.height == 0 || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(invalid!("camera intrinsics must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        linalg::mat_vec(&self.rotation, linalg::sub(x, self.center))
    }

    /// Pixel coordinates and depth, or `None` at or behind the near plane.
    pub fn project(&self, x: Vec3) -> Option<(Vec2, f64)> {
        let p = self.to_camera(x);
        if p[2] <= NEAR_PLANE {
            return None;
        }
        Some(([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy], p[2]))
    }

    /// Whether `x` projects inside the image in front of the near plane.
    pub fn sees(&self, x: Vec3) -> bool {
        match self.project(x) {
            Some((uv, _)) => {
                uv[0] >= -0.5 && uv[1] >= -0.5 && uv[0] < self.width as f64 - 0.5 && uv[1] < self.height as f64 - 0.5
            }
            None => false,
        }
    }
}

/// A training or evaluation view with its per-image appearance tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub id: u32,
    pub camera: Camera,
    /// Ground-truth image, when known.
    pub image: Option<Image>,
    /// `f_g`, length `n_g`.
    pub global_feature: Vec<f64>,
    /// `F^MAP`, `n_r × H^F × W^F`.
    pub feature_map: Tensor3,
}

impl CameraView {
    /// View with appearance tensors drawn from a seeded N(0, 0.01²).
    pub fn new(id: u32, camera: Camera, image: Option<Image>, config: &SceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32) ^ 0x5eed_f00d);
        let (fh, fw) = feature_map_size(&camera, config);
        let global_feature = normal_vec(&mut rng, config.global_dim, APPEARANCE_INIT_STD);
        let data = normal_vec(&mut rng, config.refined_dim * fh * fw, APPEARANCE_INIT_STD);
        let feature_map = Tensor3 { channels: config.refined_dim, height: fh, width: fw, data };
        Self { id, camera, image, global_feature, feature_map }
    }

    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        self.camera.validate()?;
        let min_side = 1usize << config.wavelet_levels;
        let fm = &self.feature_map;
        if fm.height < min_side || fm.width < min_side {
            return Err(config_err!("feature map {}x{} smaller than 2^M = {min_side}", fm.height, fm.width));
        }
        if fm.channels != config.refined_dim {
            return Err(config_err!("feature map has {} channels, expected n_r = {}", fm.channels, config.refined_dim));
        }
        if self.global_feature.len() != config.global_dim {
            return Err(config_err!("global feature has {} entries, expected n_g = {}", self.global_feature.len(), config.global_dim));
        }
        if let Some(img) = &self.image {
            if img.width != self.camera.width || img.height != self.camera.height {
                return Err(invalid!("view {} image size differs from camera", self.id));
            }
        }
        Ok(())
    }
}

/// Feature-map resolution for a camera: image size divided by the stride, at least `2^M`.
pub fn feature_map_size(camera: &Camera, config: &SceneConfig) -> (usize, usize) {
    let min_side = 1usize << config.wavelet_levels;
    let fh = (camera.height / config.feature_stride).max(min_side);
    let fw = (camera.width / config.feature_stride).max(min_side);
    (fh, fw)
}

pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// Anchors, views, fusion network and configuration of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub config: SceneConfig,
    pub anchors: Vec<Anchor>,
    pub views: Vec<CameraView>,
    pub fusion: HrfnParams,
}

impl SceneBundle {
    /// Voxelizes `points` into anchors at voxel centers, one anchor per
    /// occupied voxel, and initializes every learnable tensor from `seed`.
    pub fn from_points(points: &[Vec3], cameras: Vec<(u32, Camera, Option<Image>)>, config: SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let v = config.voxel_size;
        let voxels: BTreeSet<[i64; 3]> = points
            .iter()
            .map(|p| p.map(|c| libm::floor(c / v) as i64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = voxels
            .into_iter()
            .map(|cell| {
                let center = cell.map(|c| (c as f64 + 0.5) * v);
                let feature = normal_vec(&mut rng, config.intrinsic_dim, APPEARANCE_INIT_STD);
                Anchor::new(center, &config, 0.1, feature)
            })
            .collect();
        let views = cameras
            .into_iter()
            .map(|(id, cam, img)| CameraView::new(id, cam, img, &config, seed))
            .collect();
        let fusion = HrfnParams::new(&config, seed.wrapping_add(1))?;
        let bundle = Self { config, anchors, views, fusion };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for a in &self.anchors {
            a.validate(&self.config)?;
        }
        let mut ids = BTreeSet::new();
        for view in &self.views {
            view.validate(&self.config)?;
            if !ids.insert(view.id) {
                return Err(invalid!("duplicate view id {}", view.id));
            }
        }
        self.fusion.check(&self.config)
    }

    pub fn view(&self, id: u32) -> Result<&CameraView> {
        self.views.iter().find(|v| v.id == id).ok_or_else(|| invalid!("unknown view id {id}"))
    }

    pub fn view_index(&self, id: u32) -> Result<usize> {
        self.views.iter().position(|v| v.id == id).ok_or_else(|| invalid!("unknown view id {id}"))
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.config.gaussians_per_anchor
    }

    /// All Gaussians, anchor-major, with `colors` in the same order.
    pub fn gaussians(&self, colors: &[Vec3]) -> Result<Vec<Gaussian>> {
        let k = self.config.gaussians_per_anchor;
        if colors.len() != self.gaussian_count() {
            return Err(invalid!("{} colors for {} Gaussians", colors.len(), self.gaussian_count()));
        }
        Ok(self
            .anchors
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.gaussians(&colors[i * k..(i + 1) * k]))
            .collect())
    }
}
