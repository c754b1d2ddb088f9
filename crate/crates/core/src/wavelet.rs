//! Orthonormal Haar DWT on channel-major feature maps and the split feature
//! pyramid used by the appearance sampler.
//!
//! Odd heights or widths are padded to even by replicating the last row or
//! column; [`idwt1`] crops the padding away again.
//!
//! An `m`-level transform here is the full wavelet packet: every band is
//! split again at each level, giving `4^m` maps of identical size. They are
//! ordered level-major with bands `LL, LH, HL, HH` at each split, so the map
//! at index `j = b₁·4^{m−1} + … + b_m` comes from band `b₁` at the first
//! split, band `b₂` at the second, and so on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, invalid, Result};
use crate::tensor::Tensor3;

/// The four one-level sub-bands of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBandSet {
    pub ll: Tensor3,
    pub lh: Tensor3,
    pub hl: Tensor3,
    pub hh: Tensor3,
    pub level: usize,
    /// Size of the transformed map before padding.
    pub source_height: usize,
    pub source_width: usize,
}

impl SubBandSet {
    pub fn bands(&self) -> [&Tensor3; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn into_bands(self) -> [Tensor3; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub fn squared_norm(&self) -> f64 {
        self.bands().iter().map(|b| b.squared_norm()).sum()
    }
}

#[inline]
fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// One-level 2D Haar transform of every channel.
///
/// For each 2×2 block `[[a, b], [c, d]]`: `LL = (a+b+c+d)/2`,
/// `LH = (a+b−c−d)/2`, `HL = (a−b+c−d)/2`, `HH = (a−b−c+d)/2`.
pub fn dwt1(f: &Tensor3) -> Result<SubBandSet> {
    if f.channels == 0 || f.height == 0 || f.width == 0 {
        return Err(invalid!("cannot transform an empty {}x{}x{} map", f.channels, f.height, f.width));
    }
    let (h2, w2) = (half(f.height), half(f.width));
    let mut bands = [(); 4].map(|_| Tensor3::zeros(f.channels, h2, w2));
    for c in 0..f.channels {
        for i in 0..h2 {
            let r0 = 2 * i;
            let r1 = (2 * i + 1).min(f.height - 1);
            for j in 0..w2 {
                let c0 = 2 * j;
                let c1 = (2 * j + 1).min(f.width - 1);
                let a = f.get(c, r0, c0);
                let b = f.get(c, r0, c1);
                let cc = f.get(c, r1, c0);
                let d = f.get(c, r1, c1);
                let idx = bands[0].index(c, i, j);
                bands[0].data[idx] = 0.5 * (a + b + cc + d);
                bands[1].data[idx] = 0.5 * (a + b - cc - d);
                bands[2].data[idx] = 0.5 * (a - b + cc - d);
                bands[3].data[idx] = 0.5 * (a - b - cc + d);
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(SubBandSet { ll, lh, hl, hh, level: 1, source_height: f.height, source_width: f.width })
}

/// Inverse of the un-padded transform on the padded grid. With `adjoint`
/// set, padded rows and columns are folded back onto the edge they
/// replicate (the transpose of [`dwt1`]); otherwise they are cropped (the
/// inverse of [`dwt1`]).
fn synthesize(bands: [&Tensor3; 4], out_h: usize, out_w: usize, adjoint: bool) -> Tensor3 {
    let [ll, lh, hl, hh] = bands;
    let mut out = Tensor3::zeros(ll.channels, out_h, out_w);
    for c in 0..ll.channels {
        for i in 0..ll.height {
            for j in 0..ll.width {
                let idx = ll.index(c, i, j);
                let (s, v, hz, dg) = (ll.data[idx], lh.data[idx], hl.data[idx], hh.data[idx]);
                let block = [
                    (2 * i, 2 * j, 0.5 * (s + v + hz + dg)),
                    (2 * i, 2 * j + 1, 0.5 * (s + v - hz - dg)),
                    (2 * i + 1, 2 * j, 0.5 * (s - v + hz - dg)),
                    (2 * i + 1, 2 * j + 1, 0.5 * (s - v - hz + dg)),
                ];
                for (y, x, val) in block {
                    if adjoint {
                        let (y, x) = (y.min(out_h - 1), x.min(out_w - 1));
                        let k = out.index(c, y, x);
                        out.data[k] += val;
                    } else if y < out_h && x < out_w {
                        out.set(c, y, x, val);
                    }
                }
            }
        }
    }
    out
}

/// Inverse transform; exact reconstruction of the map given to [`dwt1`].
pub fn idwt1(bands: &SubBandSet) -> Tensor3 {
    synthesize(bands.bands(), bands.source_height, bands.source_width, false)
}

/// Transpose of [`dwt1`]: maps sub-band gradients back to the source map.
/// Equals [`idwt1`] for even-sized sources.
pub fn dwt1_adjoint(bands: &SubBandSet) -> Tensor3 {
    synthesize(bands.bands(), bands.source_height, bands.source_width, true)
}

/// `levels`-deep wavelet packet: `4^levels` maps, ordered as in the module docs.
pub fn packet_decompose(f: &Tensor3, levels: usize) -> Result<Vec<Tensor3>> {
    let mut maps = vec![f.clone()];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(maps.len() * 4);
        for m in &maps {
            next.extend(dwt1(m)?.into_bands());
        }
        maps = next;
    }
    Ok(maps)
}

/// Transpose of [`packet_decompose`] for a source of size `height × width`.
pub fn packet_adjoint(grads: &[Tensor3], levels: usize, height: usize, width: usize) -> Result<Tensor3> {
    if grads.len() != 1 << (2 * levels) {
        return Err(invalid!("{} gradient maps for a {levels}-level packet", grads.len()));
    }
    let mut sizes = vec![(height, width)];
    for _ in 0..levels {
        let (h, w) = *sizes.last().unwrap();
        sizes.push((half(h), half(w)));
    }
    let mut maps: Vec<Tensor3> = grads.to_vec();
    for level in (0..levels).rev() {
        let (h, w) = sizes[level];
        maps = maps
            .chunks(4)
            .map(|q| synthesize([&q[0], &q[1], &q[2], &q[3]], h, w, true))
            .collect();
    }
    Ok(maps.pop().unwrap())
}

/// Narrow or broad branch of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Narrow = 0,
    Broad = 1,
}

/// `F^MAP` split into `2M+2` channel chunks. Level 0 samples chunks 0
/// (narrow) and 1 (broad) directly; level `m ≥ 1` samples the `4^m`
/// packet maps of chunks `2m` (narrow) and `2m+1` (broad).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub base: Vec<Tensor3>,
    /// `groups[2m + branch]` holds the maps sampled at level `m`.
    pub groups: Vec<Vec<Tensor3>>,
}

impl FeaturePyramid {
    pub fn chunk_channels(&self) -> usize {
        self.base[0].channels
    }

    pub fn maps(&self, level: usize, branch: Branch) -> &[Tensor3] {
        &self.groups[2 * level + branch as usize]
    }

    /// Pulls gradients on the sampled maps (same layout as `groups`) back to
    /// a gradient on `F^MAP`.
    pub fn backward(&self, group_grads: &[Vec<Tensor3>]) -> Result<Tensor3> {
        if group_grads.len() != self.groups.len() {
            return Err(invalid!("gradient covers {} groups, pyramid has {}", group_grads.len(), self.groups.len()));
        }
        let cc = self.chunk_channels();
        let mut out = Tensor3::zeros(cc * self.base.len(), self.height, self.width);
        let plane = self.height * self.width;
        for (g, grads) in group_grads.iter().enumerate() {
            let level = g / 2;
            let chunk = if level == 0 {
                grads[0].clone()
            } else {
                packet_adjoint(grads, level, self.height, self.width)?
            };
            out.data[g * cc * plane..(g + 1) * cc * plane].copy_from_slice(&chunk.data);
        }
        Ok(out)
    }
}

/// Splits `F^MAP` into `2M+2` contiguous channel chunks and transforms the
/// chunks used at levels `1..=M`.
pub fn split_feature_map(f: &Tensor3, levels: usize) -> Result<FeaturePyramid> {
    let parts = 2 * levels + 2;
    if !f.channels.is_multiple_of(parts) {
        return Err(config_err!("{} channels cannot be split into 2M+2 = {parts} maps", f.channels));
    }
    let cc = f.channels / parts;
    let base: Vec<Tensor3> = (0..parts).map(|p| f.channel_slice(p * cc, cc)).collect();
    let mut groups = Vec::with_capacity(parts);
    for (p, chunk) in base.iter().enumerate() {
        let level = p / 2;
        groups.push(if level == 0 { vec![chunk.clone()] } else { packet_decompose(chunk, level)? });
    }
    Ok(FeaturePyramid { levels, height: f.height, width: f.width, base, groups })
}
