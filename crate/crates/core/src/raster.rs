//! CPU reference rasterizer.
//!
//! Gaussians are projected with the first-order (EWA) approximation, sorted
//! front to back by camera depth (ties broken by source index) and alpha
//! composited per pixel:
//!
//! ```text
//! C(p) = Σ_i c_i α'_i Π_{j<i} (1 − α'_j),   α'_i = min(0.99, α_i · exp(−½ dᵀ Σ₂⁻¹ d))
//! ```
//!
//! Contributions with `α' < 1/255` are skipped. Pixel `(x, y)` is sampled at
//! the integer coordinate `(x, y)`; the background is black.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::linalg::{Vec2, Vec3};
use crate::scene::{Camera, Gaussian, NEAR_PLANE};
use crate::tensor::Image;

pub const ALPHA_CLAMP: f64 = 0.99;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Added to the diagonal of every projected covariance, in pixels².
pub const COV2D_REGULARIZER: f64 = 0.3;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean: Vec2,
    /// Symmetric covariance `[xx, xy, yy]` in pixels².
    pub cov: [f64; 3],
    /// Inverse covariance `[xx, xy, yy]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub source: usize,
    /// Square root of the largest covariance eigenvalue.
    pub sigma_max: f64,
}

impl Splat2D {
    /// `exp(−½ dᵀ Σ₂⁻¹ d)` at pixel coordinate `p`.
    #[inline]
    pub fn falloff(&self, p: Vec2) -> f64 {
        let dx = p[0] - self.mean[0];
        let dy = p[1] - self.mean[1];
        let power = -0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy);
        libm::exp(power)
    }

    /// Pixel bounding box `(x0, y0, x1, y1)` (inclusive, clipped) outside of
    /// which a splat of opacity `alpha` stays below the skip threshold.
    fn support(&self, alpha: f64, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if !(alpha * 255.0 > 1.0) {
            return None;
        }
        let r = libm::sqrt(2.0 * libm::log(255.0 * alpha)) * self.sigma_max + 1.0;
        let x0 = libm::ceil(self.mean[0] - r).max(0.0);
        let y0 = libm::ceil(self.mean[1] - r).max(0.0);
        let x1 = libm::floor(self.mean[0] + r).min(width as f64 - 1.0);
        let y1 = libm::floor(self.mean[1] + r).min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// Projects `g` with the EWA Jacobian; `None` when behind the near plane or
/// when its 3σ disc misses the image entirely.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    project_with_source(g, cam, 0)
}

fn project_with_source(g: &Gaussian, cam: &Camera, source: usize) -> Option<Splat2D> {
    let t = cam.to_camera(g.mean);
    let z = t[2];
    if z <= NEAR_PLANE {
        return None;
    }
    let mean = [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy];
    let j = [
        [cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)],
    ];
    // T = J W, then Σ₂ = T Σ Tᵀ.
    let w = &cam.rotation;
    let mut tm = [[0.0; 3]; 2];
    for (r, row) in tm.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    let sigma = g.covariance();
    let mut cov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += tm[a][k] * sigma[k][l] * tm[b][l];
                }
            }
            cov[a][b] = acc;
        }
    }
    let (xx, xy, yy) = (cov[0][0] + COV2D_REGULARIZER, 0.5 * (cov[0][1] + cov[1][0]), cov[1][1] + COV2D_REGULARIZER);
    let det = xx * yy - xy * xy;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (xx + yy);
    let lambda_max = mid + libm::sqrt((mid * mid - det).max(0.0));
    let sigma_max = libm::sqrt(lambda_max);
    let r = 3.0 * sigma_max;
    if mean[0] + r < 0.0 || mean[1] + r < 0.0 || mean[0] - r > cam.width as f64 - 1.0 || mean[1] - r > cam.height as f64 - 1.0 {
        return None;
    }
    Some(Splat2D {
        mean,
        cov: [xx, xy, yy],
        conic: [yy / det, -xy / det, xx / det],
        depth: z,
        source,
        sigma_max,
    })
}

/// Projects every Gaussian and returns the survivors sorted front to back.
pub fn project_sorted(gaussians: &[Gaussian], cam: &Camera) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_with_source(g, cam, i))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(Ordering::Equal).then(a.source.cmp(&b.source)));
    splats
}

/// One recorded contribution to a pixel, front to back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub source: usize,
    /// Effective alpha after clamping.
    pub alpha: f64,
    /// Splat falloff `G` at the pixel.
    pub falloff: f64,
    /// Transmittance before this contribution.
    pub transmittance: f64,
    pub clamped: bool,
}

/// Per-pixel contribution lists kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRecord {
    pub width: usize,
    pub height: usize,
    /// CSR offsets into `contributions`, `width·height + 1` entries.
    pub offsets: Vec<usize>,
    pub contributions: Vec<Contribution>,
    pub colors: Vec<Vec3>,
}

impl RenderRecord {
    pub fn pixel(&self, x: usize, y: usize) -> &[Contribution] {
        let p = y * self.width + x;
        &self.contributions[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Hash of every discrete decision (which splats hit which pixel, which
    /// were clamped). Two renders with the same fingerprint lie on the same
    /// smooth piece of the compositing function.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for w in self.offsets.windows(2) {
            h.write(w[1] - w[0]);
        }
        for c in &self.contributions {
            h.write(c.source);
            h.write(c.clamped as usize);
        }
        h.0
    }
}

/// 64-bit FNV-1a accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, v: usize) {
        for b in (v as u64).to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated alpha `1 − T_final` per pixel, row-major.
    pub alpha: Vec<f64>,
    pub record: Option<RenderRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    /// Keep per-pixel contribution lists for [`backward_color_opacity`].
    pub record: bool,
}

/// Renders `gaussians` with explicit per-Gaussian colors and opacities.
pub fn render(
    gaussians: &[Gaussian],
    cam: &Camera,
    colors: &[Vec3],
    opacities: &[f64],
    options: RenderOptions,
) -> Result<RenderOutput> {
    render_masked(gaussians, cam, colors, opacities, None, options)
}

/// Renders using each Gaussian's own color and opacity.
pub fn render_gaussians(gaussians: &[Gaussian], cam: &Camera, options: RenderOptions) -> Result<RenderOutput> {
    let colors: Vec<Vec3> = gaussians.iter().map(|g| g.color).collect();
    let opacities: Vec<f64> = gaussians.iter().map(|g| g.opacity).collect();
    render(gaussians, cam, &colors, &opacities, options)
}

/// Renders the complement of `excluded` (indices into `gaussians`).
pub fn render_excluding(
    gaussians: &[Gaussian],
    cam: &Camera,
    colors: &[Vec3],
    opacities: &[f64],
    excluded: &[usize],
    options: RenderOptions,
) -> Result<RenderOutput> {
    let mut include = vec![true; gaussians.len()];
    for &id in excluded {
        if id >= gaussians.len() {
            return Err(invalid!("excluded Gaussian id {id} out of range ({} Gaussians)", gaussians.len()));
        }
        include[id] = false;
    }
    render_masked(gaussians, cam, colors, opacities, Some(&include), options)
}

fn render_masked(
    gaussians: &[Gaussian],
    cam: &Camera,
    colors: &[Vec3],
    opacities: &[f64],
    include: Option<&[bool]>,
    options: RenderOptions,
) -> Result<RenderOutput> {
    if colors.len() != gaussians.len() || opacities.len() != gaussians.len() {
        return Err(invalid!(
            "{} Gaussians but {} colors and {} opacities",
            gaussians.len(),
            colors.len(),
            opacities.len()
        ));
    }
    let (w, h) = (cam.width, cam.height);
    let splats: Vec<(Splat2D, (usize, usize, usize, usize))> = project_sorted(gaussians, cam)
        .into_iter()
        .filter(|s| include.is_none_or(|m| m[s.source]))
        .filter_map(|s| s.support(opacities[s.source], w, h).map(|bb| (s, bb)))
        .collect();

    let mut image = Image::new(w, h);
    let mut alpha_map = vec![0.0; w * h];
    let mut offsets = Vec::with_capacity(if options.record { w * h + 1 } else { 0 });
    let mut contributions = Vec::new();
    if options.record {
        offsets.push(0);
    }
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (s, (x0, y0, x1, y1)) in &splats {
                if x < *x0 || x > *x1 || y < *y0 || y > *y1 {
                    continue;
                }
                let g = s.falloff(p);
                let raw = opacities[s.source] * g;
                let clamped = raw > ALPHA_CLAMP;
                let a = if clamped { ALPHA_CLAMP } else { raw };
                if a < ALPHA_SKIP {
                    continue;
                }
                let col = colors[s.source];
                let weight = a * t;
                c[0] += col[0] * weight;
                c[1] += col[1] * weight;
                c[2] += col[2] * weight;
                if options.record {
                    contributions.push(Contribution { source: s.source, alpha: a, falloff: g, transmittance: t, clamped });
                }
                t *= 1.0 - a;
            }
            image.set_pixel(x, y, c);
            alpha_map[y * w + x] = 1.0 - t;
            if options.record {
                offsets.push(contributions.len());
            }
        }
    }
    let record = options.record.then(|| RenderRecord { width: w, height: h, offsets, contributions, colors: colors.to_vec() });
    Ok(RenderOutput { image, alpha: alpha_map, record })
}

/// Gradients of a scalar loss with respect to every Gaussian's color and
/// base opacity, given `dL/dC` per pixel. The falloff `G` is held constant;
/// clamped contributions pass no opacity gradient.
pub fn backward_color_opacity(output: &RenderOutput, grad_image: &Image) -> Result<(Vec<Vec3>, Vec<f64>)> {
    let record = output
        .record
        .as_ref()
        .ok_or_else(|| Error::State("render was run without contribution recording".into()))?;
    if grad_image.width != record.width || grad_image.height != record.height {
        return Err(invalid!("gradient image size does not match the render"));
    }
    let n = record.colors.len();
    let mut d_color = vec![[0.0; 3]; n];
    let mut d_opacity = vec![0.0; n];
    for y in 0..record.height {
        for x in 0..record.width {
            let g = grad_image.pixel(x, y);
            let contribs = record.pixel(x, y);
            // Suffix Σ_{k>i} c_k α'_k T_k, accumulated back to front.
            let mut suffix = [0.0; 3];
            for c in contribs.iter().rev() {
                let col = record.colors[c.source];
                let weight = c.alpha * c.transmittance;
                for ch in 0..3 {
                    d_color[c.source][ch] += g[ch] * weight;
                }
                if !c.clamped {
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        d_alpha += g[ch] * (c.transmittance * col[ch] - suffix[ch] / (1.0 - c.alpha));
                    }
                    d_opacity[c.source] += d_alpha * c.falloff;
                }
                for ch in 0..3 {
                    suffix[ch] += col[ch] * weight;
                }
            }
        }
    }
    Ok((d_color, d_opacity))
}
