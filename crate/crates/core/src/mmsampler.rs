//! Micro/macro frustum sampling of the feature pyramid.
//!
//! Every anchor center is projected into the view's feature map (image
//! pixels scaled by the feature resolution, giving the frustum center `p̂`).
//! Narrow samples sit at `p̂ + nc_i`; broad samples at `bc_i ⊙ p̂`. Both are
//! read with border-clamped bilinear interpolation on the level-0 maps and
//! on every level-`m` packet map, where the coordinate becomes `uv / 2^m`.
//! Per map, the `k_s` samples are averaged; level-`m` maps are then mixed
//! with the anchor's sub-band weights `ω`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::linalg::{self, Vec2, Vec3};
use crate::raster::Fnv;
use crate::scene::{Anchor, Camera, SceneConfig};
use crate::tensor::Tensor3;
use crate::wavelet::{Branch, FeaturePyramid};

/// One sample location on a pyramid map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumSample {
    /// Coordinates on the sampled map.
    pub uv: Vec2,
    pub kind: Branch,
    pub level: usize,
    pub subband: usize,
}

/// Frustum center `p̂` in feature-map pixels, or `None` behind the camera.
pub fn base_projection(x: Vec3, cam: &Camera, feature_size: (usize, usize)) -> Option<Vec2> {
    let (fh, fw) = feature_size;
    cam.project(x).map(|(uv, _)| {
        [uv[0] * fw as f64 / cam.width as f64, uv[1] * fh as f64 / cam.height as f64]
    })
}

/// Narrow samples `p̂ + nc_i`. The radius bound `‖nc_i‖ ≤ ṙ` is enforced
/// softly by the projection loss, not here.
pub fn narrow_projection(x: Vec3, cam: &Camera, feature_size: (usize, usize), nc: &[Vec2]) -> Option<Vec<Vec2>> {
    let center = base_projection(x, cam, feature_size)?;
    Some(nc.iter().map(|o| [center[0] + o[0], center[1] + o[1]]).collect())
}

/// `Ṙ = Ṙ_max / ‖x − x_c‖`.
pub fn broad_radius(x: Vec3, cam: &Camera, radius_max: f64) -> Result<f64> {
    let dist = linalg::norm(linalg::sub(x, cam.center));
    if !(dist > 0.0) {
        return Err(Error::DegenerateGeometry("point coincides with the camera center".into()));
    }
    Ok(radius_max / dist)
}

/// Broad samples `bc_i ⊙ p̂` and the broad radius `Ṙ`. `Ok(None)` when the
/// point is behind the camera.
pub fn broad_projection(
    x: Vec3,
    cam: &Camera,
    feature_size: (usize, usize),
    bc: &[Vec2],
    radius_max: f64,
) -> Result<Option<(Vec<Vec2>, f64)>> {
    let radius = broad_radius(x, cam, radius_max)?;
    Ok(base_projection(x, cam, feature_size).map(|c| (bc.iter().map(|b| [b[0] * c[0], b[1] * c[1]]).collect(), radius)))
}

/// Border-clamped bilinear stencil at `uv` on a `width × height` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the value varies with `u` (resp. `v`) at this point.
    pub du_live: bool,
    pub dv_live: bool,
}

impl Bilinear {
    pub fn new(uv: Vec2, width: usize, height: usize) -> Self {
        let (x0, x1, fx, du_live) = axis(uv[0], width);
        let (y0, y1, fy, dv_live) = axis(uv[1], height);
        Self { x0, x1, y0, y1, fx, fy, du_live, dv_live }
    }

    /// `(y, x, weight)` for the four taps.
    pub fn taps(&self) -> [(usize, usize, f64); 4] {
        [
            (self.y0, self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0, self.x1, self.fx * (1.0 - self.fy)),
            (self.y1, self.x0, (1.0 - self.fx) * self.fy),
            (self.y1, self.x1, self.fx * self.fy),
        ]
    }

    pub fn sample(&self, map: &Tensor3, channel: usize) -> f64 {
        self.taps().iter().map(|(y, x, w)| w * map.get(channel, *y, *x)).sum()
    }

    /// `(∂/∂u, ∂/∂v)` of the interpolated value of one channel.
    pub fn gradient(&self, map: &Tensor3, channel: usize) -> Vec2 {
        let f = |y, x| map.get(channel, y, x);
        let du = if self.du_live {
            (1.0 - self.fy) * (f(self.y0, self.x1) - f(self.y0, self.x0)) + self.fy * (f(self.y1, self.x1) - f(self.y1, self.x0))
        } else {
            0.0
        };
        let dv = if self.dv_live {
            (1.0 - self.fx) * (f(self.y1, self.x0) - f(self.y0, self.x0)) + self.fx * (f(self.y1, self.x1) - f(self.y0, self.x1))
        } else {
            0.0
        };
        [du, dv]
    }

    fn fingerprint(&self, h: &mut Fnv) {
        h.write(self.x0);
        h.write(self.y0);
        h.write(self.du_live as usize);
        h.write(self.dv_live as usize);
    }
}

fn axis(u: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    if n == 1 || u <= 0.0 {
        return (0, 1.min(n - 1), 0.0, false);
    }
    if u >= max {
        return (n - 1, n - 1, 0.0, false);
    }
    let x0 = libm::floor(u);
    (x0 as usize, x0 as usize + 1, u - x0, true)
}

/// Bilinear lookup of every channel of `map` at `uv`.
pub fn bilinear(map: &Tensor3, uv: Vec2) -> Vec<f64> {
    let b = Bilinear::new(uv, map.width, map.height);
    (0..map.channels).map(|c| b.sample(map, c)).collect()
}

/// Everything the backward pass needs from one anchor's sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// `None` when the anchor is behind the camera; its features are zero.
    pub center: Option<Vec2>,
    pub broad_radius: f64,
    /// Sample coordinates on level-0 maps, per branch.
    pub samples: [Vec<Vec2>; 2],
    /// Per group `2m + branch`, the sample-averaged features of every map.
    pub map_features: Vec<Vec<Vec<f64>>>,
    /// The refined feature `f_r`.
    pub output: Vec<f64>,
}

/// `f_r = f^n_{r,0} ⊕ f^b_{r,0} ⊕ … ⊕ f^n_{r,M} ⊕ f^b_{r,M}`, length `n_r`.
pub fn refined_feature(anchor: &Anchor, pyramid: &FeaturePyramid, cam: &Camera, config: &SceneConfig) -> Result<Vec<f64>> {
    Ok(sample_anchor(anchor, pyramid, cam, config)?.output)
}

fn check(anchor: &Anchor, pyramid: &FeaturePyramid, config: &SceneConfig) -> Result<()> {
    if pyramid.levels != config.wavelet_levels {
        return Err(config_err!("pyramid has {} levels, config M = {}", pyramid.levels, config.wavelet_levels));
    }
    if pyramid.chunk_channels() * pyramid.base.len() != config.refined_dim {
        return Err(config_err!("pyramid carries {} channels, n_r = {}", pyramid.chunk_channels() * pyramid.base.len(), config.refined_dim));
    }
    if anchor.narrow_weights.len() != pyramid.levels || anchor.broad_weights.len() != pyramid.levels {
        return Err(config_err!("anchor sub-band weights do not cover {} levels", pyramid.levels));
    }
    for m in 1..=pyramid.levels {
        let n = pyramid.maps(m, Branch::Narrow).len();
        if anchor.narrow_weights[m - 1].len() != n || anchor.broad_weights[m - 1].len() != n {
            return Err(config_err!("level {m} weights must have {n} entries"));
        }
    }
    if anchor.narrow_offsets.is_empty() || anchor.narrow_offsets.len() != anchor.broad_scales.len() {
        return Err(config_err!("nc and bc must hold the same nonzero number of samples"));
    }
    Ok(())
}

/// Samples one anchor and keeps the intermediate values.
pub fn sample_anchor(anchor: &Anchor, pyramid: &FeaturePyramid, cam: &Camera, config: &SceneConfig) -> Result<SampleTrace> {
    check(anchor, pyramid, config)?;
    let size = (pyramid.height, pyramid.width);
    let cc = pyramid.chunk_channels();
    let groups = pyramid.groups.len();
    let center = base_projection(anchor.center, cam, size);
    let Some(center) = center else {
        return Ok(SampleTrace {
            center: None,
            broad_radius: 0.0,
            samples: [Vec::new(), Vec::new()],
            map_features: vec![Vec::new(); groups],
            output: vec![0.0; config.refined_dim],
        });
    };
    let broad_radius = broad_radius(anchor.center, cam, config.broad_radius_max)?;
    let narrow: Vec<Vec2> = anchor.narrow_offsets.iter().map(|o| [center[0] + o[0], center[1] + o[1]]).collect();
    let broad: Vec<Vec2> = anchor.broad_scales.iter().map(|b| [b[0] * center[0], b[1] * center[1]]).collect();
    let samples = [narrow, broad];
    let inv_ks = 1.0 / anchor.narrow_offsets.len() as f64;

    let mut map_features = Vec::with_capacity(groups);
    let mut output = Vec::with_capacity(config.refined_dim);
    for g in 0..groups {
        let level = g / 2;
        let branch = if g % 2 == 0 { Branch::Narrow } else { Branch::Broad };
        let scale = 1.0 / (1u64 << level) as f64;
        let feats: Vec<Vec<f64>> = pyramid
            .maps(level, branch)
            .iter()
            .map(|map| {
                let mut acc = vec![0.0; cc];
                for s in &samples[g % 2] {
                    let b = Bilinear::new([s[0] * scale, s[1] * scale], map.width, map.height);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += b.sample(map, c);
                    }
                }
                acc.iter_mut().for_each(|a| *a *= inv_ks);
                acc
            })
            .collect();
        if level == 0 {
            output.extend_from_slice(&feats[0]);
        } else {
            let weights = match branch {
                Branch::Narrow => &anchor.narrow_weights[level - 1],
                Branch::Broad => &anchor.broad_weights[level - 1],
            };
            let mut mixed = vec![0.0; cc];
            for (w, f) in weights.iter().zip(&feats) {
                for (m, v) in mixed.iter_mut().zip(f) {
                    *m += w * v;
                }
            }
            output.extend_from_slice(&mixed);
        }
        map_features.push(feats);
    }
    Ok(SampleTrace { center: Some(center), broad_radius, samples, map_features, output })
}

/// Gradients of one anchor's sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerGrad {
    pub narrow_offsets: Vec<Vec2>,
    pub broad_scales: Vec<Vec2>,
    pub narrow_weights: Vec<Vec<f64>>,
    pub broad_weights: Vec<Vec<f64>>,
}

impl SamplerGrad {
    pub fn zeros(anchor: &Anchor) -> Self {
        Self {
            narrow_offsets: vec![[0.0; 2]; anchor.narrow_offsets.len()],
            broad_scales: vec![[0.0; 2]; anchor.broad_scales.len()],
            narrow_weights: anchor.narrow_weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            broad_weights: anchor.broad_weights.iter().map(|w| vec![0.0; w.len()]).collect(),
        }
    }
}

/// Zero-initialized gradient buffers shaped like `pyramid.groups`.
pub fn pyramid_grad_zeros(pyramid: &FeaturePyramid) -> Vec<Vec<Tensor3>> {
    pyramid
        .groups
        .iter()
        .map(|g| g.iter().map(|m| Tensor3::zeros(m.channels, m.height, m.width)).collect())
        .collect()
}

/// Back-propagates `d_output = dL/df_r` through one anchor's sampling,
/// accumulating into `grad` and into `map_grads` (shaped like the pyramid groups).
pub fn backward(
    anchor: &Anchor,
    pyramid: &FeaturePyramid,
    trace: &SampleTrace,
    d_output: &[f64],
    grad: &mut SamplerGrad,
    map_grads: &mut [Vec<Tensor3>],
) {
    let Some(center) = trace.center else {
        return;
    };
    let cc = pyramid.chunk_channels();
    let inv_ks = 1.0 / anchor.narrow_offsets.len() as f64;
    for (g, group_maps) in pyramid.groups.iter().enumerate() {
        let level = g / 2;
        let branch = g % 2;
        let scale = 1.0 / (1u64 << level) as f64;
        let d_slot = &d_output[g * cc..(g + 1) * cc];
        for (j, map) in group_maps.iter().enumerate() {
            let weight = if level == 0 {
                1.0
            } else {
                let (w, dw) = if branch == 0 {
                    (&anchor.narrow_weights[level - 1], &mut grad.narrow_weights[level - 1])
                } else {
                    (&anchor.broad_weights[level - 1], &mut grad.broad_weights[level - 1])
                };
                dw[j] += d_slot.iter().zip(&trace.map_features[g][j]).map(|(a, b)| a * b).sum::<f64>();
                w[j]
            };
            for (i, s) in trace.samples[branch].iter().enumerate() {
                let b = Bilinear::new([s[0] * scale, s[1] * scale], map.width, map.height);
                let mut d_uv = [0.0; 2];
                for (c, d) in d_slot.iter().enumerate() {
                    let df = d * weight * inv_ks;
                    if df == 0.0 {
                        continue;
                    }
                    let gmap = &mut map_grads[g][j];
                    for (y, x, w) in b.taps() {
                        let k = gmap.index(c, y, x);
                        gmap.data[k] += w * df;
                    }
                    let gr = b.gradient(map, c);
                    d_uv[0] += df * gr[0];
                    d_uv[1] += df * gr[1];
                }
                // Chain through the level scaling, then into nc or bc.
                let d_s = [d_uv[0] * scale, d_uv[1] * scale];
                if branch == 0 {
                    grad.narrow_offsets[i][0] += d_s[0];
                    grad.narrow_offsets[i][1] += d_s[1];
                } else {
                    grad.broad_scales[i][0] += d_s[0] * center[0];
                    grad.broad_scales[i][1] += d_s[1] * center[1];
                }
            }
        }
    }
}

/// Hash of the discrete interpolation decisions made by a trace.
pub(crate) fn fingerprint(trace: &SampleTrace, pyramid: &FeaturePyramid, h: &mut Fnv) {
    if trace.center.is_none() {
        h.write(usize::MAX);
        return;
    }
    for level in 0..=pyramid.levels {
        let map = &pyramid.maps(level, Branch::Narrow)[0];
        let scale = 1.0 / (1u64 << level) as f64;
        for s in trace.samples.iter().flatten() {
            Bilinear::new([s[0] * scale, s[1] * scale], map.width, map.height).fingerprint(h);
        }
    }
}

/// Density of the bilinear taps of all of an anchor's samples, on the
/// level-0 feature grid (`height × width`, row-major). Level-`m` taps are
/// spread uniformly over the `2^m × 2^m` texels they cover.
pub fn sample_density(anchor: &Anchor, pyramid: &FeaturePyramid, cam: &Camera, config: &SceneConfig) -> Result<Vec<f64>> {
    let trace = sample_anchor(anchor, pyramid, cam, config)?;
    let (h, w) = (pyramid.height, pyramid.width);
    let mut density = vec![0.0; h * w];
    if trace.center.is_none() {
        return Ok(density);
    }
    for level in 0..=pyramid.levels {
        let map = &pyramid.maps(level, Branch::Narrow)[0];
        let step = 1usize << level;
        let scale = 1.0 / step as f64;
        let spread = 1.0 / (step * step) as f64;
        for s in trace.samples.iter().flatten() {
            let b = Bilinear::new([s[0] * scale, s[1] * scale], map.width, map.height);
            for (y, x, wt) in b.taps() {
                for yy in y * step..((y + 1) * step).min(h) {
                    for xx in x * step..((x + 1) * step).min(w) {
                        density[yy * w + xx] += wt * spread;
                    }
                }
            }
        }
    }
    Ok(density)
}
