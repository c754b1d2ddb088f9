//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Every check compares library output against an oracle written here from
//! the defining formulas, not against other library code.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatwave_core::linalg::Vec3;
use splatwave_core::partition::{self, BlockManifest, BLOCK_EXPANSION};
use splatwave_core::raster::{self, RenderOptions};
use splatwave_core::synthetic::{self, Preset, SyntheticSpec};
use splatwave_core::trainer::{self, Family, GradcheckOptions, LrSchedule, TrainConfig};
use splatwave_core::{losses, wavelet, Camera, Gaussian, Image, Quat, Tensor3};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- compositing

fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct OracleSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    index: usize,
}

fn oracle_project(g: &Gaussian, i: usize, cam: &Camera) -> Option<OracleSplat> {
    let w = cam.rotation;
    let rel = [g.mean[0] - cam.center[0], g.mean[1] - cam.center[1], g.mean[2] - cam.center[2]];
    let t: Vec<f64> = (0..3).map(|r| (0..3).map(|c| w[r][c] * rel[c]).sum()).collect();
    if t[2] <= 0.01 {
        return None;
    }
    let r = quat_matrix(g.rotation.to_array());
    let mut sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            sigma[a][b] = (0..3).map(|k| r[a][k] * g.scale[k] * g.scale[k] * r[b][k]).sum();
        }
    }
    let z = t[2];
    let j = [[cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)], [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)]];
    let jw: Vec<Vec<f64>> = (0..2).map(|a| (0..3).map(|c| (0..3).map(|k| j[a][k] * w[k][c]).sum()).collect()).collect();
    let mut cov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            cov[a][b] = (0..3).map(|k| (0..3).map(|l| jw[a][k] * sigma[k][l] * jw[b][l]).sum::<f64>()).sum();
        }
    }
    let (xx, xy, yy) = (cov[0][0] + 0.3, (cov[0][1] + cov[1][0]) / 2.0, cov[1][1] + 0.3);
    let det = xx * yy - xy * xy;
    if det <= 0.0 {
        return None;
    }
    let mean = [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy];
    let lmax = (xx + yy) / 2.0 + (((xx + yy) / 2.0).powi(2) - det).max(0.0).sqrt();
    let reach = 3.0 * lmax.sqrt();
    let (wd, ht) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    if mean[0] + reach < 0.0 || mean[1] + reach < 0.0 || mean[0] - reach > wd || mean[1] - reach > ht {
        return None;
    }
    Some(OracleSplat { mean, conic: [yy / det, -xy / det, xx / det], depth: z, index: i })
}

/// Front-to-back compositing of every surviving splat at every pixel.
fn oracle_render(gaussians: &[Gaussian], cam: &Camera) -> Vec<f64> {
    let mut splats: Vec<OracleSplat> = gaussians.iter().enumerate().filter_map(|(i, g)| oracle_project(g, i, cam)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let mut out = vec![0.0; cam.width * cam.height * 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut transmittance = 1.0;
            let mut c = [0.0; 3];
            for s in &splats {
                let (dx, dy) = (x as f64 - s.mean[0], y as f64 - s.mean[1]);
                let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                let alpha = (gaussians[s.index].opacity * (-0.5 * q).exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += gaussians[s.index].color[k] * alpha * transmittance;
                }
                transmittance *= 1.0 - alpha;
            }
            out[(y * cam.width + x) * 3..][..3].copy_from_slice(&c);
        }
    }
    out
}

fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian> {
    (0..n)
        .map(|_| {
            let q = Quat::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .unwrap_or(Quat::IDENTITY);
            Gaussian::new(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                q,
                [rng.random_range(0.03..0.5), rng.random_range(0.03..0.5), rng.random_range(0.03..0.5)],
                rng.random_range(0.0..1.0),
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            )
            .unwrap()
        })
        .collect()
}

fn compositing_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut culled = 0;
    for scene in 0..200 {
        let n = rng.random_range(1..=16);
        let gaussians = random_gaussians(&mut rng, n);
        // Some cameras sit inside the cloud, so near-plane culling is exercised.
        let dist = if scene % 5 == 0 { rng.random_range(0.3..1.2) } else { rng.random_range(2.5..5.0) };
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let eye = [dist * theta.cos(), dist * theta.sin(), rng.random_range(-1.0..1.5)];
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], rng.random_range(10.0..30.0), 16, 16);
        let got = raster::render_gaussians(&gaussians, &cam, RenderOptions::default()).map_err(|e| e.to_string())?.image;
        let want = oracle_render(&gaussians, &cam);
        culled += gaussians.iter().enumerate().filter(|(i, g)| oracle_project(g, *i, &cam).is_none()).count();
        for (a, b) in got.data.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max pixel difference {worst:e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("200 scenes, max diff {worst:e}, {culled} splats culled, {:.2} s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = vec![0.0f64; Family::TRAINABLE.len()];
    let (mut checked, mut skipped, mut moved) = (0, 0, 0);
    for seed in 0..20u64 {
        let spec = SyntheticSpec { anchors: 4, gaussians_per_anchor: 10, image_size: 24, focal: 26.0, ..Preset::Tiny.spec() };
        let mut s = synthetic::generate_with(&spec, 100 + seed).map_err(|e| e.to_string())?.bundle;
        // Move the sampler and gains off their initial values so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in &mut s.anchors {
            for nc in &mut a.narrow_offsets {
                *nc = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            }
            for bc in &mut a.broad_scales {
                *bc = [rng.random_range(0.85..1.15), rng.random_range(0.85..1.15)];
            }
        }
        s.fusion.omega_r = rng.random_range(0.5..1.5);
        s.fusion.omega_v = rng.random_range(0.5..1.5);
        let view = s.views[seed as usize % s.views.len()].id;
        for (f, family) in Family::TRAINABLE.into_iter().enumerate() {
            let options = GradcheckOptions { samples: 6, seed, ..Default::default() };
            let mut r = trainer::gradcheck(&s, view, family, None, options).map_err(|e| e.to_string())?;
            // A scalar family has one entry; if a ReLU or clamp switches within ±h,
            // check again at a nearby value of the scalar.
            let mut probe = s.clone();
            for _ in 0..4 {
                if r.checked > 0 || !matches!(family, Family::OmegaR | Family::OmegaV) {
                    break;
                }
                match family {
                    Family::OmegaR => probe.fusion.omega_r += 5e-4,
                    _ => probe.fusion.omega_v += 5e-4,
                }
                r = trainer::gradcheck(&probe, view, family, None, options).map_err(|e| e.to_string())?;
                moved += 1;
            }
            ensure(r.checked > 0, || format!("seed {seed}: no {family:?} entry could be checked"))?;
            worst[f] = worst[f].max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
        for family in Family::FROZEN {
            let r = trainer::gradcheck(&s, view, family, None, GradcheckOptions::default()).map_err(|e| e.to_string())?;
            ensure(r.max_abs_analytic == 0.0, || format!("frozen {family:?} has gradient {}", r.max_abs_analytic))?;
        }
    }
    let (f, max) = worst.iter().enumerate().fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
    ensure(max < 1e-4, || format!("{:?} relative error {max:e}", Family::TRAINABLE[f]))?;
    within(start.elapsed(), 120.0)?;
    Ok(format!(
        "13 families x 20 scenes, {checked} entries (skipped {skipped}, {moved} scalar re-probes), worst {max:e} ({:?}), {:.1} s",
        Family::TRAINABLE[f],
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- wavelet

fn wavelet_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut round, mut energy): (f64, f64) = (0.0, 0.0);
    for &(h, w, c) in &[(2, 2, 1), (8, 8, 3), (6, 10, 4), (16, 16, 8), (32, 48, 16), (64, 64, 32), (64, 64, 32)] {
        let f = Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0));
        let bands = wavelet::dwt1(&f).map_err(|e| e.to_string())?;
        round = round.max(wavelet::idwt1(&bands).max_abs_diff(&f));
        let norm: f64 = f.data.iter().map(|v| v * v).sum();
        let band_norm: f64 = [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().flat_map(|b| b.data.iter()).map(|v| v * v).sum();
        energy = energy.max((norm - band_norm).abs() / norm);
        if h % 4 == 0 && w % 4 == 0 {
            let packet = wavelet::packet_decompose(&f, 2).map_err(|e| e.to_string())?;
            let packet_norm: f64 = packet.iter().flat_map(|m| m.data.iter()).map(|v| v * v).sum();
            energy = energy.max((norm - packet_norm).abs() / norm);
            let back = wavelet::packet_adjoint(&packet, 2, h, w).map_err(|e| e.to_string())?;
            round = round.max(back.max_abs_diff(&f));
        }
    }
    ensure(round < 1e-10, || format!("round-trip error {round:e}"))?;
    ensure(energy < 1e-9, || format!("relative energy error {energy:e}"))?;

    let (a, b, c, d) = (0.75, -1.5, 2.25, 4.0);
    let block = Tensor3::from_vec(1, 2, 2, vec![a, b, c, d]).map_err(|e| e.to_string())?;
    let bands = wavelet::dwt1(&block).map_err(|e| e.to_string())?;
    let got = [bands.ll.data[0], bands.lh.data[0], bands.hl.data[0], bands.hh.data[0]];
    let want = [(a + b + c + d) / 2.0, (a + b - c - d) / 2.0, (a - b + c - d) / 2.0, (a - b - c + d) / 2.0];
    ensure(got == want, || format!("2x2 bands {got:?}, expected {want:?}"))?;
    Ok(format!("round trip {round:e}, energy {energy:e}, 2x2 closed form exact"))
}

// ---------------------------------------------------------------- metrics

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Mean SSIM over every full 11×11 window, computed window by window.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy] * g[dx] / total;
                        let (p, q) = (a.get(x0 + dx, y0 + dy, ch), b.get(x0 + dx, y0 + dy, ch));
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
        let got = losses::ssim(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - naive_ssim(&a, &b)).abs());
        let same = losses::ssim(&a, &a).map_err(|e| e.to_string())?;
        ensure(same == 1.0, || format!("ssim(I, I) = {same}"))?;
    }
    ensure(worst < 1e-8, || format!("ssim differs from the windowed oracle by {worst:e}"))?;
    let black = Image::new(16, 16);
    let tenth = Image::filled(16, 16, [0.1; 3]);
    let p = losses::psnr(&tenth, &black).map_err(|e| e.to_string())?;
    ensure(p == 20.0, || format!("uniform 0.1 error gives {p} dB"))?;
    Ok(format!("ssim oracle diff {worst:e} on 25 pairs, ssim(I,I) = 1, psnr = 20 dB exactly"))
}

// ---------------------------------------------------------------- partition

fn sees(cam: &Camera, p: Vec3) -> bool {
    let rel = [p[0] - cam.center[0], p[1] - cam.center[1], p[2] - cam.center[2]];
    let t: Vec<f64> = (0..3).map(|r| (0..3).map(|c| cam.rotation[r][c] * rel[c]).sum()).collect();
    if t[2] <= 0.01 {
        return false;
    }
    let (u, v) = (cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy);
    u >= -0.5 && v >= -0.5 && u < cam.width as f64 - 0.5 && v < cam.height as f64 - 0.5
}

fn n_vis(p: usize, cams: &[u32], visible: &[Vec<u32>]) -> usize {
    visible[p].iter().filter(|c| cams.contains(c)).count()
}

fn min_supervision(blocks: &[(Vec<usize>, Vec<u32>)], visible: &[Vec<u32>]) -> usize {
    blocks.iter().flat_map(|(pts, cams)| pts.iter().map(|&p| n_vis(p, cams, visible))).min().unwrap_or(0)
}

fn check_overlap(blocks: &[BlockManifest], points: &[Vec3]) -> Result<(), String> {
    for b in blocks {
        for k in 0..2 {
            let [lo, hi] = b.cell_bounds[k];
            let width = hi - lo;
            for (side, inner) in [(0, lo.is_finite()), (1, hi.is_finite())] {
                let (cell, grown) = (b.cell_bounds[k][side], b.bounds[k][side]);
                if inner && width.is_finite() {
                    let pad = if side == 0 { cell - grown } else { grown - cell };
                    ensure((pad - BLOCK_EXPANSION * width).abs() <= 1e-12 * width.abs().max(1.0), || {
                        format!("block {} axis {k} side {side}: pad {pad}, cell width {width}", b.id)
                    })?;
                } else if !inner {
                    ensure(grown.is_infinite(), || format!("block {} outer side is finite", b.id))?;
                }
            }
        }
        let axes = [b.axes.0, b.axes.1];
        let inside: Vec<usize> = (0..points.len())
            .filter(|&p| (0..2).all(|k| points[p][axes[k]] >= b.bounds[k][0] && points[p][axes[k]] <= b.bounds[k][1]))
            .collect();
        ensure(inside == b.point_ids, || format!("block {} point list differs from its bounds", b.id))?;
    }
    for p in 0..points.len() {
        ensure(blocks.iter().any(|b| b.point_ids.contains(&p)), || format!("point {p} is in no block"))?;
    }
    Ok(())
}

fn partition_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut steps, mut improved) = (0, 0);
    for instance in 0..100 {
        let np = rng.random_range(8..=50);
        let nc = rng.random_range(1..=20);
        let points: Vec<Vec3> = (0..np).map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..3.0), rng.random_range(-0.1..0.1)]).collect();
        let cams: Vec<Camera> = (0..nc)
            .map(|_| {
                let (x, y) = (rng.random_range(-0.5..4.5), rng.random_range(-0.5..3.5));
                let target = [x + rng.random_range(-1.0..1.0), y + rng.random_range(-1.0..1.0), 0.0];
                Camera::look_at([x, y, rng.random_range(1.0..3.0)], target, [0.0, 1.0, 0.0], rng.random_range(8.0..20.0), 16, 16)
            })
            .collect();
        let ids: Vec<u32> = (0..nc as u32).map(|i| 3 * i + 1).collect();
        let refs: Vec<(u32, &Camera)> = ids.iter().copied().zip(&cams).collect();
        let kappa = rng.random_range(0.1..0.9);
        let fail = |m: String| format!("instance {instance}: {m}");

        let visible: Vec<Vec<u32>> = points.iter().map(|&p| refs.iter().filter(|(_, c)| sees(c, p)).map(|(id, _)| *id).collect()).collect();
        let tau = kappa * visible.iter().map(Vec::len).sum::<usize>() as f64 / np as f64;
        let vis = partition::visibility_stats(&points, &refs, kappa).map_err(|e| fail(e.to_string()))?;
        ensure(vis.visible == visible, || fail("visibility table differs from projection oracle".into()))?;

        let mut blocks = partition::initial_division(&points, &refs, 2, 2, None).map_err(|e| fail(e.to_string()))?;
        check_overlap(&blocks, &points).map_err(fail)?;
        let before: Vec<(Vec<usize>, Vec<u32>)> = blocks.iter().map(|b| (b.point_ids.clone(), b.camera_ids())).collect();

        for b in &mut blocks {
            let mut have = b.camera_ids();
            let trace = partition::psg_stage1(b, &vis, &ids).map_err(|e| fail(e.to_string()))?;
            // Direct assignment: every camera of a globally rare point.
            for &p in &b.point_ids {
                if (visible[p].len() as f64) < tau {
                    for c in &visible[p] {
                        if !have.contains(c) {
                            have.push(*c);
                        }
                    }
                }
            }
            // Each greedy pick must be the exhaustive maximum-gain camera, lowest id first.
            for step in &trace {
                let mut best: Option<(u32, usize)> = None;
                for &c in &ids {
                    if have.contains(&c) {
                        continue;
                    }
                    let gain = b.point_ids.iter().filter(|&&p| (n_vis(p, &have, &visible) as f64) < tau && visible[p].contains(&c)).count();
                    if best.is_none_or(|(_, g)| gain > g) {
                        best = Some((c, gain));
                    }
                }
                ensure(best.is_some_and(|(c, g)| c == step.camera && g > 0), || {
                    fail(format!("block {} picked {} but the exhaustive best is {best:?}", b.id, step.camera))
                })?;
                have.push(step.camera);
                steps += 1;
            }
            let mut final_set = b.camera_ids();
            final_set.sort_unstable();
            have.sort_unstable();
            ensure(final_set == have, || fail(format!("block {} camera set {final_set:?}, oracle {have:?}", b.id)))?;
            // Postcondition: τ reached, or every camera that sees the point is assigned.
            for &p in &b.point_ids {
                let reached = n_vis(p, &have, &visible) as f64 >= tau;
                let exhausted = visible[p].iter().all(|c| have.contains(c));
                ensure(reached || exhausted, || fail(format!("block {} point {p} is under-supervised", b.id)))?;
            }
        }
        check_overlap(&blocks, &points).map_err(fail)?;
        let after: Vec<(Vec<usize>, Vec<u32>)> = blocks.iter().map(|b| (b.point_ids.clone(), b.camera_ids())).collect();
        let (m0, m1) = (min_supervision(&before, &visible), min_supervision(&after, &visible));
        ensure(m1 >= m0, || fail(format!("minimum supervision fell from {m0} to {m1}")))?;
        improved += usize::from(m1 > m0);
    }
    Ok(format!("100 instances, {steps} greedy picks verified, supervision minimum raised on {improved}"))
}

// ---------------------------------------------------------------- stage 2

fn stage2_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut smallest = f64::INFINITY;
    for scene in 0..20 {
        // Two clusters far apart along x; each camera looks straight down at one.
        let mut gaussians = Vec::new();
        for cx in [-4.0, 4.0] {
            for _ in 0..rng.random_range(3..8) {
                let mean = [cx + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)];
                let color = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
                gaussians.push(Gaussian::new(mean, Quat::IDENTITY, [rng.random_range(0.3..0.6); 3], rng.random_range(0.7..1.0), color).unwrap());
            }
        }
        let points: Vec<Vec3> = gaussians.iter().map(|g| g.mean).collect();
        let left = Camera::look_at([-4.0, 0.0, 3.0], [-4.0, 0.0, 0.0], [0.0, 1.0, 0.0], 20.0, 24, 24);
        let right = Camera::look_at([4.0, 0.0, 3.0], [4.0, 0.0, 0.0], [0.0, 1.0, 0.0], 20.0, 24, 24);
        for eta in [0.0, 0.01, 0.1, 0.25, 0.5] {
            let mut blocks = partition::initial_division(&points, &[], 2, 1, Some((0, 1))).map_err(|e| e.to_string())?;
            let added = partition::psg_stage2(&mut blocks, &gaussians, &[(7, &left), (9, &right)], eta).map_err(|e| e.to_string())?;
            let pairs: Vec<(usize, u32)> = added.iter().map(|a| (a.0, a.1)).collect();
            ensure(pairs == vec![(0, 7), (1, 9)], || format!("scene {scene}, eta {eta}: added {added:?}"))?;
            smallest = smallest.min(added.iter().map(|a| a.2).fold(f64::INFINITY, f64::min));
        }
        let own: Vec<usize> = (0..gaussians.len()).filter(|&i| gaussians[i].mean[0] > 0.0).collect();
        let d = partition::removal_dissimilarity(&gaussians, &left, &own).map_err(|e| e.to_string())?;
        ensure(d == 0.0, || format!("scene {scene}: removing unseen content changed the view by {d}"))?;
    }
    Ok(format!("20 two-block scenes, eta up to 0.5, smallest qualifying dissimilarity {smallest:.3}"))
}

// ---------------------------------------------------------------- training

/// Trailing `w`-iteration means must never rise across a `w`-iteration gap.
fn running_mean_violations(losses: &[f64], w: usize) -> usize {
    let means: Vec<f64> = (w - 1..losses.len()).map(|t| losses[t + 1 - w..=t].iter().sum::<f64>() / w as f64).collect();
    (0..means.len().saturating_sub(w)).filter(|&t| means[t + w] > means[t]).count()
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let s = synthetic::generate(Preset::Tiny, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { views: Some(s.train_views.clone()), ..TrainConfig::desk(2000) };
    let (trained, log) = trainer::train(s.bundle, &cfg).map_err(|e| e.to_string())?;
    let train_psnr = trainer::mean_psnr(&trained, &s.train_views).map_err(|e| e.to_string())?;
    let fitted = trainer::fit_appearance(trained, &s.heldout_views, 300, LrSchedule::new(1e-2, 1e-3), None).map_err(|e| e.to_string())?;
    let heldout_psnr = trainer::mean_psnr(&fitted, &s.heldout_views).map_err(|e| e.to_string())?;
    let violations = running_mean_violations(&log.losses(), 200);
    let summary = format!(
        "train {train_psnr:.2} dB, held-out {heldout_psnr:.2} dB, {violations} running-mean rises, {:.1} s",
        start.elapsed().as_secs_f64()
    );
    ensure(train_psnr >= 30.0 && heldout_psnr >= 25.0 && violations == 0, || summary.clone())?;
    within(start.elapsed(), 300.0)?;
    Ok(summary)
}

// ---------------------------------------------------------------- schedule

fn schedule_fairness() -> Outcome {
    let mut cases = 0;
    for blocks in 1..=12 {
        for slots in 1..=blocks {
            for periods in 1..=40 {
                let s = partition::rotational_schedule(blocks, slots, 10, periods * 10).map_err(|e| e.to_string())?;
                ensure(s.periods.len() == periods, || format!("{blocks}/{slots}: {} periods", s.periods.len()))?;
                let mut counts = vec![0usize; blocks];
                for p in &s.periods {
                    let mut seen = p.blocks.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    ensure(seen.len() == slots, || format!("{blocks}/{slots}: a block occupies two slots"))?;
                    for &b in &p.blocks {
                        counts[b] += 1;
                    }
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                ensure(hi - lo <= 1, || format!("{blocks} blocks, {slots} slots, {periods} periods: counts {counts:?}"))?;
                cases += 1;
            }
        }
    }
    let s = partition::rotational_schedule(6, 6, 10, 400).map_err(|e| e.to_string())?;
    ensure(s.periods.iter().all(|p| p.blocks == (0..6).collect::<Vec<_>>()), || "6 slots for 6 blocks still rotate".into())?;
    Ok(format!("{cases} configurations, counts within 1; 6/6 static"))
}

// ---------------------------------------------------------------- determinism

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_splatwave")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("splatwave {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_cli(&["gen", "--preset", "tiny", "--seed", "9", "--out", &p("scene")])?;
    std::fs::write(dir.path().join("train.toml"), "iterations = 60\nrates = \"desk\"\nseed = 9\n").map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let log = p(&format!("log_{run}.tsv"));
        run_cli(&["train", "--scene", &p("scene"), "--config", &p("train.toml"), "--out", &p(run), "--log", &log])?;
        logs.push(std::fs::read(Path::new(&log)).map_err(|e| e.to_string())?);
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    ensure(lines == 61, || format!("log has {lines} lines"))?;
    ensure(logs[0] == logs[1], || "log.tsv differs between runs".into())?;
    let scenes = [std::fs::read(dir.path().join("a/scene.bin")), std::fs::read(dir.path().join("b/scene.bin"))];
    ensure(matches!(&scenes, [Ok(a), Ok(b)] if a == b), || "trained tensors differ between runs".into())?;
    Ok(format!("two CLI runs, {} bytes of log.tsv identical", logs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("compositing oracle", compositing_oracle),
        ("gradient suite", gradient_suite),
        ("wavelet suite", wavelet_suite),
        ("metric suite", metric_suite),
        ("partitioner suite", partition_suite),
        ("stage-2 sanity", stage2_sanity),
        ("desk-scale training", end_to_end),
        ("rotation fairness", schedule_fairness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
