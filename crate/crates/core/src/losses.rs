//! Image metrics and the training objective.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{self, Vec2};
use crate::mmsampler;
use crate::scene::{Anchor, CameraView, Gaussian};
use crate::tensor::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height));
    }
    if a.data.is_empty() {
        return Err(invalid!("empty image"));
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if libm::fabs(sum) >= libm::fabs(v) {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(compensated_sum(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y))) / a.data.len() as f64)
}

/// `20·log10(1/RMSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-20.0 * libm::log10(libm::sqrt(m))).min(PSNR_CAP))
}

/// Mean absolute error over all pixels and channels.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / a.data.len() as f64)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Valid-region separable correlation of a `h × w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Transpose of [`filter_valid`]: spreads a valid-region map back to `h × w`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`,
/// `C2 = 0.03²`, averaged over the valid region and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.unwrap()))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid!("image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"));
    }
    let k = ssim_kernel();
    let count = ((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1) * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, w, h, &k);
        let mu_y = filter_valid(&y, w, h, &k);
        let e_xx = filter_valid(&xx, w, h, &k);
        let e_yy = filter_valid(&yy, w, h, &k);
        let e_xy = filter_valid(&xy, w, h, &k);
        let n = mu_x.len();
        let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * sxy + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = sxx + syy + SSIM_C2;
            let f = n1 * n2 / (d1 * d2);
            total += f;
            if want_grad {
                let df_dmx = 2.0 * my * n2 / (d1 * d2) - f * 2.0 * mx / d1;
                let df_dsxx = -f / d2;
                let df_dsxy = 2.0 * n1 / (d1 * d2);
                ga[p] = (df_dmx - 2.0 * mx * df_dsxx - my * df_dsxy) / count;
                gb[p] = df_dsxx / count;
                gc[p] = df_dsxy / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ta = filter_valid_adjoint(&ga, w, h, &k);
            let tb = filter_valid_adjoint(&gb, w, h, &k);
            let tc = filter_valid_adjoint(&gc, w, h, &k);
            for q in 0..w * h {
                g.data[q * 3 + c] = ta[q] + 2.0 * x[q] * tb[q] + y[q] * tc[q];
            }
        }
    }
    Ok((total / count, grad))
}

/// `λ_SSIM·(1 − SSIM) + λ_1·L1`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda_ssim: f64, lambda_l1: f64) -> Result<f64> {
    if lambda_ssim < 0.0 || lambda_l1 < 0.0 {
        return Err(invalid!("loss weights must be nonnegative"));
    }
    let ssim_term = if lambda_ssim == 0.0 { 0.0 } else { 1.0 - ssim(rendered, target)? };
    Ok(lambda_ssim * ssim_term + lambda_l1 * l1(rendered, target)?)
}

/// Photometric terms and `dL_photo/d rendered`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricTerms {
    /// `1 − SSIM`.
    pub ssim_term: f64,
    pub l1: f64,
    pub grad: Image,
}

pub fn photometric_with_grad(rendered: &Image, target: &Image, lambda_ssim: f64, lambda_l1: f64) -> Result<PhotometricTerms> {
    let (s, mut grad) = ssim_with_grad(rendered, target)?;
    let n = rendered.data.len() as f64;
    for (i, g) in grad.data.iter_mut().enumerate() {
        let diff = rendered.data[i] - target.data[i];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = -lambda_ssim * *g + lambda_l1 * sign / n;
    }
    Ok(PhotometricTerms { ssim_term: 1.0 - s, l1: l1(rendered, target)?, grad })
}

/// Hinge penalties of one anchor's frustum samples and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHinge {
    pub value: f64,
    pub d_narrow: Vec<Vec2>,
    pub d_broad: Vec<Vec2>,
}

/// `Σ max(‖nc_i‖ − ṙ, 0) + Σ max(‖bc_i ⊙ p̂ − p̂‖ − Ṙ, 0)` for one anchor.
pub fn projection_hinge(nc: &[Vec2], bc: &[Vec2], center: Vec2, narrow_radius: f64, broad_radius: f64) -> ProjectionHinge {
    let mut value = 0.0;
    let mut d_narrow = vec![[0.0; 2]; nc.len()];
    let mut d_broad = vec![[0.0; 2]; bc.len()];
    for (o, d) in nc.iter().zip(d_narrow.iter_mut()) {
        let len = linalg::norm2(*o);
        if len > narrow_radius {
            value += len - narrow_radius;
            *d = [o[0] / len, o[1] / len];
        }
    }
    for (s, d) in bc.iter().zip(d_broad.iter_mut()) {
        let off = [(s[0] - 1.0) * center[0], (s[1] - 1.0) * center[1]];
        let len = linalg::norm2(off);
        if len > broad_radius {
            value += len - broad_radius;
            *d = [off[0] * center[0] / len, off[1] * center[1] / len];
        }
    }
    ProjectionHinge { value, d_narrow, d_broad }
}

/// Projection loss summed over every anchor in front of each view.
pub fn projection_loss(anchors: &[Anchor], views: &[&CameraView], narrow_radius: f64, broad_radius_max: f64) -> Result<f64> {
    let mut total = 0.0;
    for view in views {
        let size = (view.feature_map.height, view.feature_map.width);
        for a in anchors {
            let Some(center) = mmsampler::base_projection(a.center, &view.camera, size) else {
                continue;
            };
            let radius = mmsampler::broad_radius(a.center, &view.camera, broad_radius_max)?;
            total += projection_hinge(&a.narrow_offsets, &a.broad_scales, center, narrow_radius, radius).value;
        }
    }
    Ok(total)
}

/// `Σ_i s_x·s_y·s_z`.
pub fn volume_loss(gaussians: &[Gaussian]) -> f64 {
    gaussians.iter().map(|g| g.scale[0] * g.scale[1] * g.scale[2]).sum()
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ssim: f64,
    pub l1: f64,
    pub proj: f64,
    pub vol: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.2, l1: 0.8, proj: 0.01, vol: 0.01 }
    }
}

/// Every loss component of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_photo: f64,
    /// `1 − SSIM`.
    pub l_ssim: f64,
    pub l_1: f64,
    pub l_proj: f64,
    pub l_vol: f64,
    pub total: f64,
    pub weights: Option<LossWeights>,
}

/// Fills a [`LossBreakdown`]: `L = λ_SSIM·l_ssim + λ_1·l_1 + λ_vol·l_vol + λ_proj·l_proj`.
pub fn total_loss(l_ssim: f64, l_1: f64, l_proj: f64, l_vol: f64, weights: LossWeights) -> Result<LossBreakdown> {
    if [l_ssim, l_1, l_proj, l_vol].iter().any(|v| *v < 0.0) {
        return Err(invalid!("loss components must be nonnegative"));
    }
    let l_photo = weights.ssim * l_ssim + weights.l1 * l_1;
    let total = l_photo + weights.vol * l_vol + weights.proj * l_proj;
    Ok(LossBreakdown { l_photo, l_ssim, l_1, l_proj, l_vol, total, weights: Some(weights) })
}
