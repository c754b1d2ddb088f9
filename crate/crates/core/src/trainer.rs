//! Training loop with hand-written gradients.
//!
//! One view per iteration: sample `f_r` for every anchor, run the fusion
//! network, render, and back-propagate the loss to Gaussian opacities,
//! anchor features and sampling parameters, the fusion network, and the
//! view's `f_g` and `F^MAP`. Gaussian positions, scales and rotations are
//! frozen.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Error, Result};
use crate::fusion::{self, FusionInput, FusionTrace, HrfnParams};
use crate::linalg::{self, Vec2, Vec3};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::mmsampler::{self, SampleTrace, SamplerGrad};
use crate::partition::{self, RotationSchedule};
use crate::raster::{self, Fnv, RenderOptions};
use crate::scene::{Gaussian, SceneBundle};
use crate::tensor::{Image, Tensor3};
use crate::wavelet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate decaying exponentially from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub const fn constant(rate: f64) -> Self {
        Self { start: rate, end: rate }
    }

    /// `start·(end/start)^{t/T}`.
    pub fn at(&self, t: usize, total: usize) -> f64 {
        if self.start == 0.0 || total == 0 {
            return self.start;
        }
        self.start * libm::pow(self.end / self.start, t as f64 / total as f64)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.start >= 0.0 && self.end >= 0.0 && self.end <= self.start) || (self.start > 0.0 && self.end == 0.0) {
            return Err(config_err!("{name} learning rate must satisfy 0 < end <= start (or both 0)"));
        }
        Ok(())
    }
}

/// Blocks of view ids trained in rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub blocks: Vec<Vec<u32>>,
    pub slots: usize,
    /// Iterations between rotations.
    pub period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Recorded with the run; training itself draws no random numbers.
    pub seed: u64,
    /// Narrow offsets and broad scales.
    pub lr_sampler: LrSchedule,
    /// Fusion weights, biases, `ω_r` and `ω_v`.
    pub lr_fusion: LrSchedule,
    /// Per-view `f_g` and `F^MAP`.
    pub lr_appearance: LrSchedule,
    /// Intrinsic features and sub-band weights.
    pub lr_anchor: LrSchedule,
    pub lr_opacity: LrSchedule,
    /// Defaults to the scene's λ values.
    pub weights: Option<LossWeights>,
    /// Views to train on; defaults to every view with an image.
    pub views: Option<Vec<u32>>,
    pub schedule: Option<BlockSchedule>,
    /// Record train-view PSNR every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            seed: 0,
            lr_sampler: LrSchedule::new(1e-4, 1e-5),
            lr_fusion: LrSchedule::new(5e-4, 5e-5),
            lr_appearance: LrSchedule::new(1e-4, 1e-6),
            lr_anchor: LrSchedule::new(1e-3, 1e-4),
            lr_opacity: LrSchedule::new(1e-2, 1e-3),
            weights: None,
            views: None,
            schedule: None,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Rates that converge within a few thousand iterations on small scenes.
    pub fn desk(iterations: usize) -> Self {
        Self {
            iterations,
            lr_sampler: LrSchedule::new(1e-3, 1e-4),
            lr_fusion: LrSchedule::new(3e-3, 1e-4),
            lr_appearance: LrSchedule::new(1e-2, 1e-4),
            lr_anchor: LrSchedule::new(1e-2, 1e-4),
            lr_opacity: LrSchedule::new(2e-2, 1e-3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr_sampler.validate("sampler")?;
        self.lr_fusion.validate("fusion")?;
        self.lr_appearance.validate("appearance")?;
        self.lr_anchor.validate("anchor")?;
        self.lr_opacity.validate("opacity")?;
        if let Some(s) = &self.schedule {
            if s.period < s.slots {
                return Err(config_err!("rotation period {} shorter than {} slots", s.period, s.slots));
            }
            if s.blocks.iter().any(Vec::is_empty) {
                return Err(config_err!("every scheduled block needs at least one view"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub view: u32,
    pub block: Option<usize>,
    pub period: Option<usize>,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub iteration: usize,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub evals: Vec<EvalEntry>,
    /// Seconds per iteration, when a clock was supplied.
    pub timings: Vec<f64>,
}

impl TrainLog {
    /// Tab-separated loss table. Timings are excluded so that seeded runs
    /// produce identical output.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iteration\tview\tblock\ttotal\tphoto\tssim\tl1\tproj\tvol\n");
        for e in &self.entries {
            let block = e.block.map_or(String::from("-"), |b| format!("{b}"));
            let l = &e.loss;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
                e.iteration, e.view, block, l.total, l.l_photo, l.l_ssim, l.l_1, l.l_proj, l.l_vol
            );
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss.total).collect()
    }
}

/// Trailing mean over `window` entries, defined from index `window − 1` on.
pub fn running_mean(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Gradients of one anchor's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub feature: Vec<f64>,
    pub opacities: Vec<f64>,
    pub sampler: SamplerGrad,
}

/// All gradients of one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub anchors: Vec<AnchorGrad>,
    pub fusion: HrfnParams,
    pub global: Vec<f64>,
    pub feature_map: Tensor3,
    /// `dL/dĉ` for every Gaussian.
    pub colors: Vec<Vec3>,
    /// `dL/df_r` for every anchor.
    pub refined: Vec<Vec<f64>>,
}

/// Result of evaluating the objective on one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub loss: LossBreakdown,
    pub image: Image,
    /// Hash of every discrete branch taken; equal hashes mean the loss is
    /// smooth between the two evaluations.
    pub fingerprint: u64,
    pub grads: Option<Grads>,
}

/// Parameter families, for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Rendered Gaussian colors (fusion outputs).
    Colors,
    Opacities,
    Intrinsic,
    /// Sampled `f_r` (fusion inputs).
    Refined,
    Global,
    NarrowOffsets,
    BroadScales,
    NarrowWeights,
    BroadWeights,
    OmegaR,
    OmegaV,
    FusionWeights,
    FeatureMap,
    // Frozen.
    Offsets,
    Scales,
    Rotations,
}

impl Family {
    pub const TRAINABLE: [Family; 13] = [
        Family::Colors,
        Family::Opacities,
        Family::Intrinsic,
        Family::Refined,
        Family::Global,
        Family::NarrowOffsets,
        Family::BroadScales,
        Family::NarrowWeights,
        Family::BroadWeights,
        Family::OmegaR,
        Family::OmegaV,
        Family::FusionWeights,
        Family::FeatureMap,
    ];
    pub const FROZEN: [Family; 3] = [Family::Offsets, Family::Scales, Family::Rotations];

    pub fn is_frozen(self) -> bool {
        Self::FROZEN.contains(&self)
    }
}

impl core::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "colors" => Family::Colors,
            "opacities" => Family::Opacities,
            "intrinsic" => Family::Intrinsic,
            "refined" => Family::Refined,
            "global" => Family::Global,
            "narrow-offsets" => Family::NarrowOffsets,
            "broad-scales" => Family::BroadScales,
            "narrow-weights" => Family::NarrowWeights,
            "broad-weights" => Family::BroadWeights,
            "omega-r" => Family::OmegaR,
            "omega-v" => Family::OmegaV,
            "fusion-weights" => Family::FusionWeights,
            "feature-map" => Family::FeatureMap,
            "offsets" => Family::Offsets,
            "scales" => Family::Scales,
            "rotations" => Family::Rotations,
            other => return Err(invalid!("unknown parameter family {other:?}")),
        })
    }
}

struct AnchorForward {
    sample: SampleTrace,
    refined: Vec<f64>,
    direction: Vec3,
    fusion: FusionTrace,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward pass on `scene.views[view]`, optionally with gradients.
/// `perturb` shifts one entry of an intermediate family (colors or `f_r`).
fn run_pass(
    scene: &SceneBundle,
    view: usize,
    weights: &LossWeights,
    want_grad: bool,
    perturb: Option<(Family, usize, f64)>,
) -> Result<Pass> {
    let config = &scene.config;
    let v = scene.views.get(view).ok_or_else(|| invalid!("view index {view} out of range"))?;
    let target = v.image.as_ref().ok_or_else(|| invalid!("view {} has no image", v.id))?;
    let cam = &v.camera;
    let k = config.gaussians_per_anchor;
    let pyramid = wavelet::split_feature_map(&v.feature_map, config.wavelet_levels)?;

    let mut fp = Fnv::default();
    let mut forwards = Vec::with_capacity(scene.anchors.len());
    let mut colors = Vec::with_capacity(scene.gaussian_count());
    for (ai, a) in scene.anchors.iter().enumerate() {
        let sample = mmsampler::sample_anchor(a, &pyramid, cam, config)?;
        mmsampler::fingerprint(&sample, &pyramid, &mut fp);
        let mut refined = sample.output.clone();
        if let Some((Family::Refined, idx, delta)) = perturb {
            if idx / config.refined_dim == ai {
                refined[idx % config.refined_dim] += delta;
            }
        }
        let direction = linalg::normalize(linalg::sub(a.center, cam.center));
        let input = FusionInput {
            position: a.center,
            intrinsic: &a.feature,
            refined: &refined,
            global: &v.global_feature,
            direction,
        };
        let trace = fusion::forward_traced(&input, &scene.fusion)?;
        trace.fingerprint(&mut fp);
        colors.extend(trace.colors());
        forwards.push(AnchorForward { sample, refined, direction, fusion: trace });
    }
    if let Some((Family::Colors, idx, delta)) = perturb {
        colors[idx / 3][idx % 3] += delta;
    }
    let gaussians = scene.gaussians(&colors)?;
    let opacities: Vec<f64> = gaussians.iter().map(|g| g.opacity).collect();
    let out = raster::render(&gaussians, cam, &colors, &opacities, RenderOptions { record: true })?;
    fp.write(out.record.as_ref().map_or(0, |r| r.fingerprint() as usize));

    let photo = losses::photometric_with_grad(&out.image, target, weights.ssim, weights.l1)?;
    for (a, b) in out.image.data.iter().zip(&target.data) {
        fp.write((sign(a - b) + 1.0) as usize);
    }
    let mut l_proj = 0.0;
    let mut hinges = Vec::with_capacity(scene.anchors.len());
    for (a, f) in scene.anchors.iter().zip(&forwards) {
        let h = match f.sample.center {
            Some(c) => {
                losses::projection_hinge(&a.narrow_offsets, &a.broad_scales, c, config.narrow_radius, f.sample.broad_radius)
            }
            None => losses::ProjectionHinge {
                value: 0.0,
                d_narrow: vec![[0.0; 2]; a.narrow_offsets.len()],
                d_broad: vec![[0.0; 2]; a.broad_scales.len()],
            },
        };
        for d in h.d_narrow.iter().chain(&h.d_broad) {
            fp.write(usize::from(d[0] != 0.0 || d[1] != 0.0));
        }
        l_proj += h.value;
        hinges.push(h);
    }
    let l_vol = losses::volume_loss(&gaussians);
    let loss = losses::total_loss(photo.ssim_term, photo.l1, l_proj, l_vol, *weights)?;

    let grads = if want_grad {
        let (d_colors, d_opacities) = raster::backward_color_opacity(&out, &photo.grad)?;
        let mut fusion_grad = scene.fusion.zeros_like();
        let mut global = vec![0.0; v.global_feature.len()];
        let mut map_grads = mmsampler::pyramid_grad_zeros(&pyramid);
        let mut anchors = Vec::with_capacity(scene.anchors.len());
        let mut refined_grads = Vec::with_capacity(scene.anchors.len());
        for (ai, (a, f)) in scene.anchors.iter().zip(&forwards).enumerate() {
            let input = FusionInput {
                position: a.center,
                intrinsic: &a.feature,
                refined: &f.refined,
                global: &v.global_feature,
                direction: f.direction,
            };
            let dc = &d_colors[ai * k..(ai + 1) * k];
            let gi = fusion::backward(&input, &scene.fusion, &f.fusion, dc, &mut fusion_grad);
            for (g, d) in global.iter_mut().zip(&gi.global) {
                *g += d;
            }
            let mut sampler = SamplerGrad::zeros(a);
            mmsampler::backward(a, &pyramid, &f.sample, &gi.refined, &mut sampler, &mut map_grads);
            let h = &hinges[ai];
            for (g, d) in sampler.narrow_offsets.iter_mut().zip(&h.d_narrow) {
                g[0] += weights.proj * d[0];
                g[1] += weights.proj * d[1];
            }
            for (g, d) in sampler.broad_scales.iter_mut().zip(&h.d_broad) {
                g[0] += weights.proj * d[0];
                g[1] += weights.proj * d[1];
            }
            anchors.push(AnchorGrad {
                feature: gi.intrinsic,
                opacities: d_opacities[ai * k..(ai + 1) * k].to_vec(),
                sampler,
            });
            refined_grads.push(gi.refined);
        }
        let feature_map = pyramid.backward(&map_grads)?;
        Some(Grads { anchors, fusion: fusion_grad, global, feature_map, colors: d_colors, refined: refined_grads })
    } else {
        None
    };
    Ok(Pass { loss, image: out.image, fingerprint: fp.0, grads })
}

fn weights_for(scene: &SceneBundle, config: Option<LossWeights>) -> LossWeights {
    config.unwrap_or(LossWeights {
        ssim: scene.config.lambda_ssim,
        l1: scene.config.lambda_l1,
        proj: scene.config.lambda_proj,
        vol: scene.config.lambda_vol,
    })
}

/// Loss and gradients of the scene on one view (by id).
pub fn evaluate(scene: &SceneBundle, view_id: u32, weights: Option<LossWeights>, with_grad: bool) -> Result<Pass> {
    let idx = scene.view_index(view_id)?;
    run_pass(scene, idx, &weights_for(scene, weights), with_grad, None)
}

/// Renders a view with the current model.
pub fn render_view(scene: &SceneBundle, view_id: u32) -> Result<Image> {
    let gaussians = view_gaussians(scene, view_id)?;
    Ok(raster::render_gaussians(&gaussians, &scene.view(view_id)?.camera, RenderOptions::default())?.image)
}

/// Every Gaussian of the scene, colored as seen from one view.
pub fn view_gaussians(scene: &SceneBundle, view_id: u32) -> Result<Vec<Gaussian>> {
    let v = scene.view(view_id)?;
    let config = &scene.config;
    let pyramid = wavelet::split_feature_map(&v.feature_map, config.wavelet_levels)?;
    let mut colors = Vec::with_capacity(scene.gaussian_count());
    for a in &scene.anchors {
        let refined = mmsampler::refined_feature(a, &pyramid, &v.camera, config)?;
        let input = FusionInput {
            position: a.center,
            intrinsic: &a.feature,
            refined: &refined,
            global: &v.global_feature,
            direction: linalg::normalize(linalg::sub(a.center, v.camera.center)),
        };
        colors.extend(fusion::hrfn_forward(&input, &scene.fusion)?);
    }
    scene.gaussians(&colors)
}

/// PSNR and SSIM of a view against its image.
pub fn view_metrics(scene: &SceneBundle, view_id: u32) -> Result<(f64, f64)> {
    let img = render_view(scene, view_id)?;
    let target = scene.view(view_id)?.image.as_ref().ok_or_else(|| invalid!("view {view_id} has no image"))?;
    Ok((losses::psnr(&img, target)?, losses::ssim(&img, target)?))
}

pub fn mean_psnr(scene: &SceneBundle, view_ids: &[u32]) -> Result<f64> {
    if view_ids.is_empty() {
        return Err(invalid!("no views to evaluate"));
    }
    let mut sum = 0.0;
    for &id in view_ids {
        sum += view_metrics(scene, id)?.0;
    }
    Ok(sum / view_ids.len() as f64)
}

/// First and second moments of one parameter group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamSlot {
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.steps = 0;
        }
        self.steps += 1;
        let c1 = 1.0 - libm::pow(ADAM_BETA1, self.steps as f64);
        let c2 = 1.0 - libm::pow(ADAM_BETA2, self.steps as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
}

fn flat2(v: &[Vec2]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat2(dst: &mut [Vec2], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.chunks(2)) {
        *d = [s[0], s[1]];
    }
}

fn flat_nested(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat_nested(dst: &mut [Vec<f64>], src: &[f64]) {
    let mut i = 0;
    for row in dst {
        let n = row.len();
        row.copy_from_slice(&src[i..i + n]);
        i += n;
    }
}

#[derive(Debug, Clone, Default)]
struct Optimizer {
    sampler: Vec<AdamSlot>,
    anchor: Vec<AdamSlot>,
    opacity: Vec<AdamSlot>,
    fusion: AdamSlot,
    appearance: Vec<AdamSlot>,
}

#[derive(Debug, Clone, Copy)]
struct Rates {
    sampler: f64,
    anchor: f64,
    opacity: f64,
    fusion: f64,
    appearance: f64,
}

impl Optimizer {
    fn new(scene: &SceneBundle) -> Self {
        let a = scene.anchors.len();
        Self {
            sampler: vec![AdamSlot::default(); a],
            anchor: vec![AdamSlot::default(); a],
            opacity: vec![AdamSlot::default(); a],
            fusion: AdamSlot::default(),
            appearance: vec![AdamSlot::default(); scene.views.len()],
        }
    }

    fn step_shared(&mut self, scene: &mut SceneBundle, grads: &Grads, r: Rates) {
        for (i, (a, g)) in scene.anchors.iter_mut().zip(&grads.anchors).enumerate() {
            let mut p = flat2(&a.narrow_offsets);
            p.extend(flat2(&a.broad_scales));
            let mut d = flat2(&g.sampler.narrow_offsets);
            d.extend(flat2(&g.sampler.broad_scales));
            self.sampler[i].step(&mut p, &d, r.sampler);
            let n = a.narrow_offsets.len() * 2;
            unflat2(&mut a.narrow_offsets, &p[..n]);
            unflat2(&mut a.broad_scales, &p[n..]);

            let mut p = a.feature.clone();
            p.extend(flat_nested(&a.narrow_weights));
            p.extend(flat_nested(&a.broad_weights));
            let mut d = g.feature.clone();
            d.extend(flat_nested(&g.sampler.narrow_weights));
            d.extend(flat_nested(&g.sampler.broad_weights));
            self.anchor[i].step(&mut p, &d, r.anchor);
            let nf = a.feature.len();
            let nw: usize = a.narrow_weights.iter().map(Vec::len).sum();
            a.feature.copy_from_slice(&p[..nf]);
            unflat_nested(&mut a.narrow_weights, &p[nf..nf + nw]);
            unflat_nested(&mut a.broad_weights, &p[nf + nw..]);

            self.opacity[i].step(&mut a.opacities, &g.opacities, r.opacity);
            a.opacities.iter_mut().for_each(|o| *o = o.clamp(0.0, 1.0));
        }
        let mut p = scene.fusion.flatten_layers();
        p.push(scene.fusion.omega_r);
        p.push(scene.fusion.omega_v);
        let mut d = grads.fusion.flatten_layers();
        d.push(grads.fusion.omega_r);
        d.push(grads.fusion.omega_v);
        self.fusion.step(&mut p, &d, r.fusion);
        let n = p.len();
        scene.fusion.omega_v = p[n - 1];
        scene.fusion.omega_r = p[n - 2];
        scene.fusion.unflatten_layers(&p[..n - 2]);
    }

    fn step_appearance(&mut self, scene: &mut SceneBundle, view: usize, grads: &Grads, lr: f64) {
        let v = &mut scene.views[view];
        let mut p = v.global_feature.clone();
        p.extend_from_slice(&v.feature_map.data);
        let mut d = grads.global.clone();
        d.extend_from_slice(&grads.feature_map.data);
        self.appearance[view].step(&mut p, &d, lr);
        let ng = v.global_feature.len();
        v.global_feature.copy_from_slice(&p[..ng]);
        v.feature_map.data.copy_from_slice(&p[ng..]);
    }
}

fn count_non_finite(values: impl Iterator<Item = f64>) -> usize {
    values.filter(|v| !v.is_finite()).count()
}

/// Which tensors hold non-finite values.
fn diagnose(scene: &SceneBundle, view: usize, loss: &LossBreakdown) -> String {
    let anchors = count_non_finite(scene.anchors.iter().flat_map(|a| {
        a.feature
            .iter()
            .chain(a.opacities.iter())
            .chain(a.narrow_offsets.iter().flatten())
            .chain(a.broad_scales.iter().flatten())
            .chain(a.narrow_weights.iter().flatten())
            .chain(a.broad_weights.iter().flatten())
            .copied()
            .collect::<Vec<_>>()
    }));
    let mut fusion_vals = scene.fusion.flatten_layers();
    fusion_vals.push(scene.fusion.omega_r);
    fusion_vals.push(scene.fusion.omega_v);
    let fusion = count_non_finite(fusion_vals.into_iter());
    let v = &scene.views[view];
    let global = count_non_finite(v.global_feature.iter().copied());
    let fmap = count_non_finite(v.feature_map.data.iter().copied());
    format!(
        "view {} loss {:?}; non-finite values: anchors {anchors}, fusion {fusion}, f_g {global}, F^MAP {fmap}",
        v.id, loss
    )
}

/// Picks the view for each iteration.
enum ViewPicker {
    RoundRobin(Vec<usize>),
    Rotation { schedule: RotationSchedule, blocks: Vec<Vec<usize>>, cursors: Vec<usize> },
}

impl ViewPicker {
    fn next(&mut self, t: usize) -> (usize, Option<usize>, Option<usize>) {
        match self {
            ViewPicker::RoundRobin(views) => (views[t % views.len()], None, None),
            ViewPicker::Rotation { schedule, blocks, cursors } => {
                let period = t / schedule.period;
                let slot = (t - period * schedule.period) % schedule.num_slots;
                let block = schedule.periods[period].blocks[slot];
                let list = &blocks[block];
                let view = list[cursors[block] % list.len()];
                cursors[block] += 1;
                (view, Some(block), Some(period))
            }
        }
    }
}

fn resolve_views(scene: &SceneBundle, ids: &[u32]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            let i = scene.view_index(id)?;
            if scene.views[i].image.is_none() {
                return Err(invalid!("view {id} has no image to train on"));
            }
            Ok(i)
        })
        .collect()
}

/// Trains without timing.
pub fn train(scene: SceneBundle, config: &TrainConfig) -> Result<(SceneBundle, TrainLog)> {
    train_inner(scene, config, None)
}

/// Trains, recording per-iteration durations from `clock` (seconds).
pub fn train_with_clock(scene: SceneBundle, config: &TrainConfig, clock: &mut dyn FnMut() -> f64) -> Result<(SceneBundle, TrainLog)> {
    train_inner(scene, config, Some(clock))
}

fn train_inner(
    mut scene: SceneBundle,
    config: &TrainConfig,
    mut clock: Option<&mut dyn FnMut() -> f64>,
) -> Result<(SceneBundle, TrainLog)> {
    scene.validate()?;
    config.validate()?;
    let mut log = TrainLog::default();
    if config.iterations == 0 {
        return Ok((scene, log));
    }
    let train_ids: Vec<u32> = match &config.views {
        Some(v) => v.clone(),
        None => scene.views.iter().filter(|v| v.image.is_some()).map(|v| v.id).collect(),
    };
    if train_ids.is_empty() {
        return Err(invalid!("no views with images to train on"));
    }
    let mut picker = match &config.schedule {
        None => ViewPicker::RoundRobin(resolve_views(&scene, &train_ids)?),
        Some(s) => {
            let schedule = partition::rotational_schedule(s.blocks.len(), s.slots, s.period, config.iterations)?;
            let blocks = s.blocks.iter().map(|b| resolve_views(&scene, b)).collect::<Result<Vec<_>>>()?;
            let cursors = vec![0; blocks.len()];
            ViewPicker::Rotation { schedule, blocks, cursors }
        }
    };
    let weights = weights_for(&scene, config.weights);
    let mut opt = Optimizer::new(&scene);
    let total = config.iterations;
    for t in 0..total {
        let started = clock.as_mut().map(|c| c());
        let (view, block, period) = picker.next(t);
        let pass = run_pass(&scene, view, &weights, true, None)?;
        if !pass.loss.total.is_finite() {
            return Err(Error::NonFinite { iteration: t, diagnostic: diagnose(&scene, view, &pass.loss) });
        }
        let grads = pass.grads.as_ref().expect("gradients requested");
        let rates = Rates {
            sampler: config.lr_sampler.at(t, total),
            anchor: config.lr_anchor.at(t, total),
            opacity: config.lr_opacity.at(t, total),
            fusion: config.lr_fusion.at(t, total),
            appearance: config.lr_appearance.at(t, total),
        };
        opt.step_shared(&mut scene, grads, rates);
        opt.step_appearance(&mut scene, view, grads, rates.appearance);
        log.entries.push(LogEntry { iteration: t, view: scene.views[view].id, block, period, loss: pass.loss });
        if config.eval_every > 0 && (t + 1) % config.eval_every == 0 {
            log.evals.push(EvalEntry { iteration: t + 1, mean_psnr: mean_psnr(&scene, &train_ids)? });
        }
        if let (Some(c), Some(s)) = (clock.as_mut(), started) {
            log.timings.push(c() - s);
        }
    }
    Ok((scene, log))
}

/// Optimizes only `f_g` and `F^MAP` of `view_ids` against their images,
/// with everything shared frozen. Used to embed held-out views.
pub fn fit_appearance(
    mut scene: SceneBundle,
    view_ids: &[u32],
    iterations: usize,
    lr: LrSchedule,
    weights: Option<LossWeights>,
) -> Result<SceneBundle> {
    lr.validate("appearance")?;
    let views = resolve_views(&scene, view_ids)?;
    if views.is_empty() {
        return Ok(scene);
    }
    let weights = weights_for(&scene, weights);
    let mut opt = Optimizer::new(&scene);
    for t in 0..iterations {
        let view = views[t % views.len()];
        let pass = run_pass(&scene, view, &weights, true, None)?;
        if !pass.loss.total.is_finite() {
            return Err(Error::NonFinite { iteration: t, diagnostic: diagnose(&scene, view, &pass.loss) });
        }
        opt.step_appearance(&mut scene, view, pass.grads.as_ref().expect("gradients requested"), lr.at(t, iterations));
    }
    Ok(scene)
}

/// Outcome of a gradient check on one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub family: Family,
    pub max_rel_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because a discrete branch changed within `±h`.
    pub skipped: usize,
    /// Largest analytic gradient magnitude among the checked entries.
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Relative errors use `max(|a|, |fd|, floor)` as the denominator.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { samples: 12, step: 1e-4, seed: 0, floor: 1e-6 }
    }
}

fn family_len(scene: &SceneBundle, view: usize, family: Family) -> usize {
    let c = &scene.config;
    let a = scene.anchors.len();
    let ks = c.frustum_samples;
    let weights: usize = (1..=c.wavelet_levels).map(|m| c.subband_count(m)).sum();
    match family {
        Family::Colors => scene.gaussian_count() * 3,
        Family::Opacities => scene.gaussian_count(),
        Family::Intrinsic => a * c.intrinsic_dim,
        Family::Refined => a * c.refined_dim,
        Family::Global => scene.views[view].global_feature.len(),
        Family::NarrowOffsets | Family::BroadScales => a * ks * 2,
        Family::NarrowWeights | Family::BroadWeights => a * weights,
        Family::OmegaR | Family::OmegaV => 1,
        Family::FusionWeights => scene.fusion.parameter_count(),
        Family::FeatureMap => scene.views[view].feature_map.data.len(),
        Family::Offsets | Family::Scales => scene.gaussian_count() * 3,
        Family::Rotations => scene.gaussian_count() * 4,
    }
}

fn nested_mut(v: &mut [Vec<f64>], mut idx: usize) -> &mut f64 {
    for row in v.iter_mut() {
        if idx < row.len() {
            return &mut row[idx];
        }
        idx -= row.len();
    }
    panic!("index past nested buffer")
}

fn nested_get(v: &[Vec<f64>], mut idx: usize) -> f64 {
    for row in v {
        if idx < row.len() {
            return row[idx];
        }
        idx -= row.len();
    }
    panic!("index past nested buffer")
}

/// Shifts one trainable scalar of a parameter family.
fn shift_param(scene: &mut SceneBundle, view: usize, family: Family, idx: usize, delta: f64) {
    let c = scene.config.clone();
    let k = c.gaussians_per_anchor;
    let per_anchor = |n: usize| (idx / n, idx % n);
    match family {
        Family::Opacities => {
            let (a, j) = per_anchor(k);
            scene.anchors[a].opacities[j] += delta;
        }
        Family::Intrinsic => {
            let (a, j) = per_anchor(c.intrinsic_dim);
            scene.anchors[a].feature[j] += delta;
        }
        Family::Global => scene.views[view].global_feature[idx] += delta,
        Family::NarrowOffsets => {
            let (a, j) = per_anchor(c.frustum_samples * 2);
            scene.anchors[a].narrow_offsets[j / 2][j % 2] += delta;
        }
        Family::BroadScales => {
            let (a, j) = per_anchor(c.frustum_samples * 2);
            scene.anchors[a].broad_scales[j / 2][j % 2] += delta;
        }
        Family::NarrowWeights | Family::BroadWeights => {
            let n: usize = (1..=c.wavelet_levels).map(|m| c.subband_count(m)).sum();
            let (a, j) = per_anchor(n);
            let w = if family == Family::NarrowWeights {
                &mut scene.anchors[a].narrow_weights
            } else {
                &mut scene.anchors[a].broad_weights
            };
            *nested_mut(w, j) += delta;
        }
        Family::OmegaR => scene.fusion.omega_r += delta,
        Family::OmegaV => scene.fusion.omega_v += delta,
        Family::FusionWeights => {
            let mut p = scene.fusion.flatten_layers();
            p[idx] += delta;
            scene.fusion.unflatten_layers(&p);
        }
        Family::FeatureMap => scene.views[view].feature_map.data[idx] += delta,
        _ => unreachable!("not a directly shifted family"),
    }
}

fn analytic(grads: &Grads, scene: &SceneBundle, family: Family, idx: usize) -> f64 {
    let c = &scene.config;
    let k = c.gaussians_per_anchor;
    let per_anchor = |n: usize| (idx / n, idx % n);
    match family {
        Family::Colors => grads.colors[idx / 3][idx % 3],
        Family::Opacities => {
            let (a, j) = per_anchor(k);
            grads.anchors[a].opacities[j]
        }
        Family::Intrinsic => {
            let (a, j) = per_anchor(c.intrinsic_dim);
            grads.anchors[a].feature[j]
        }
        Family::Refined => {
            let (a, j) = per_anchor(c.refined_dim);
            grads.refined[a][j]
        }
        Family::Global => grads.global[idx],
        Family::NarrowOffsets => {
            let (a, j) = per_anchor(c.frustum_samples * 2);
            grads.anchors[a].sampler.narrow_offsets[j / 2][j % 2]
        }
        Family::BroadScales => {
            let (a, j) = per_anchor(c.frustum_samples * 2);
            grads.anchors[a].sampler.broad_scales[j / 2][j % 2]
        }
        Family::NarrowWeights | Family::BroadWeights => {
            let n: usize = (1..=c.wavelet_levels).map(|m| c.subband_count(m)).sum();
            let (a, j) = per_anchor(n);
            let s = &grads.anchors[a].sampler;
            nested_get(if family == Family::NarrowWeights { &s.narrow_weights } else { &s.broad_weights }, j)
        }
        Family::OmegaR => grads.fusion.omega_r,
        Family::OmegaV => grads.fusion.omega_v,
        Family::FusionWeights => grads.fusion.flatten_layers()[idx],
        Family::FeatureMap => grads.feature_map.data[idx],
        Family::Offsets | Family::Scales | Family::Rotations => 0.0,
    }
}

/// Compares analytic gradients of one family against central differences
/// on a seeded subset of its entries. Frozen families report zero
/// gradients without comparison.
pub fn gradcheck(
    scene: &SceneBundle,
    view_id: u32,
    family: Family,
    weights: Option<LossWeights>,
    options: GradcheckOptions,
) -> Result<GradcheckReport> {
    let view = scene.view_index(view_id)?;
    let weights = weights_for(scene, weights);
    let base = run_pass(scene, view, &weights, true, None)?;
    let grads = base.grads.as_ref().expect("gradients requested");
    let n = family_len(scene, view, family);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut report = GradcheckReport { family, max_rel_error: 0.0, checked: 0, skipped: 0, max_abs_analytic: 0.0 };
    if family.is_frozen() {
        report.checked = n.min(options.samples);
        return Ok(report);
    }
    let h = options.step;
    let intermediate = matches!(family, Family::Colors | Family::Refined);
    let eval = |delta: f64, idx: usize| -> Result<Pass> {
        if intermediate {
            run_pass(scene, view, &weights, false, Some((family, idx, delta)))
        } else {
            let mut s = scene.clone();
            shift_param(&mut s, view, family, idx, delta);
            run_pass(&s, view, &weights, false, None)
        }
    };
    for idx in order {
        if report.checked >= options.samples {
            break;
        }
        let plus = eval(h, idx)?;
        let minus = eval(-h, idx)?;
        if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
            report.skipped += 1;
            continue;
        }
        let fd = (plus.loss.total - minus.loss.total) / (2.0 * h);
        let a = analytic(grads, scene, family, idx);
        let denom = libm::fabs(a).max(libm::fabs(fd)).max(options.floor);
        report.max_rel_error = report.max_rel_error.max(libm::fabs(a - fd) / denom);
        report.max_abs_analytic = report.max_abs_analytic.max(libm::fabs(a));
        report.checked += 1;
    }
    Ok(report)
}
