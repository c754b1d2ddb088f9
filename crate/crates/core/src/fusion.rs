//! Hierarchical residual fusion network.
//!
//! Four MLP stages fuse the positional encoding of the anchor center with
//! the intrinsic (`f_v`), refined (`f_r`) and global (`f_g`) features and the
//! view direction `d`:
//!
//! ```text
//! emb    = M1(γ(x) ⊕ f_v ⊕ f_r ⊕ f_g) ⊕ ω_r·f_r
//! colors = σ(M4(M3(M2(emb) ⊕ ω_v·f_v) ⊕ d))
//! ```
//!
//! Every linear layer is followed by a ReLU except the last layer of M4,
//! whose `3k` outputs go through a sigmoid.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::linalg::Vec3;
use crate::raster::Fnv;
use crate::scene::SceneConfig;

/// Layer widths of the four stages.
pub const DEFAULT_HIDDEN: [&[usize]; 4] = [&[128, 96], &[96, 64], &[48, 48], &[48]];

/// `[sin(2^l π x_d), cos(2^l π x_d)]`, ordered by octave `l`, then axis `d`,
/// then sin before cos.
pub fn positional_encoding(x: Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * frequencies);
    for l in 0..frequencies {
        let w = (1u64 << l) as f64 * PI;
        for xd in x {
            out.push(libm::sin(w * xd));
            out.push(libm::cos(w * xd));
        }
    }
    out
}

/// Dense layer `y = W x + b`, `W` row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = libm::sqrt(6.0 / inputs as f64);
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self { inputs, outputs, weight, bias: vec![0.0; outputs] }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, d) in dz.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }
}

/// All fusion network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrfnParams {
    /// Layers of M1..M4 in order; `stage_lengths` says how many belong to each.
    pub layers: Vec<Linear>,
    pub stage_lengths: [usize; 4],
    /// Gain on the refined-feature residual.
    pub omega_r: f64,
    /// Gain on the intrinsic-feature residual.
    pub omega_v: f64,
    pub pe_frequencies: usize,
}

/// Input dimensions of the four stages given the per-stage output widths.
fn stage_inputs(config: &SceneConfig, outs: [usize; 3]) -> [usize; 4] {
    [
        6 * config.pe_frequencies + config.intrinsic_dim + config.refined_dim + config.global_dim,
        outs[0] + config.refined_dim,
        outs[1] + config.intrinsic_dim,
        outs[2] + 3,
    ]
}

impl HrfnParams {
    pub fn new(config: &SceneConfig, seed: u64) -> Result<Self> {
        Self::with_hidden(config, DEFAULT_HIDDEN, seed)
    }

    /// Seeded He-uniform weights, zero biases, `ω_r = ω_v = 1`.
    pub fn with_hidden(config: &SceneConfig, hidden: [&[usize]; 4], seed: u64) -> Result<Self> {
        if hidden[..3].iter().any(|h| h.is_empty()) {
            return Err(config_err!("stages 1-3 need at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outs = [*hidden[0].last().unwrap(), *hidden[1].last().unwrap(), *hidden[2].last().unwrap()];
        let ins = stage_inputs(config, outs);
        let mut layers = Vec::new();
        let mut stage_lengths = [0; 4];
        for s in 0..4 {
            let mut widths: Vec<usize> = hidden[s].to_vec();
            if s == 3 {
                widths.push(3 * config.gaussians_per_anchor);
            }
            let mut fan_in = ins[s];
            for w in widths {
                layers.push(Linear::he_uniform(fan_in, w, &mut rng));
                fan_in = w;
            }
            stage_lengths[s] = layers.len() - stage_lengths[..s].iter().sum::<usize>();
        }
        Ok(Self { layers, stage_lengths, omega_r: 1.0, omega_v: 1.0, pe_frequencies: config.pe_frequencies })
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
            stage_lengths: self.stage_lengths,
            omega_r: 0.0,
            omega_v: 0.0,
            pe_frequencies: self.pe_frequencies,
        }
    }

    fn stage(&self, s: usize) -> core::ops::Range<usize> {
        let start: usize = self.stage_lengths[..s].iter().sum();
        start..start + self.stage_lengths[s]
    }

    fn stage_out(&self, s: usize) -> usize {
        self.layers[self.stage(s).end - 1].outputs
    }

    /// Verifies the layer chain against the configured feature sizes.
    pub fn check(&self, config: &SceneConfig) -> Result<()> {
        if self.stage_lengths.contains(&0) || self.stage_lengths.iter().sum::<usize>() != self.layers.len() {
            return Err(config_err!("fusion network stage layout is inconsistent"));
        }
        if self.pe_frequencies != config.pe_frequencies {
            return Err(config_err!("fusion network expects {} encoding octaves, config has {}", self.pe_frequencies, config.pe_frequencies));
        }
        let ins = stage_inputs(config, [self.stage_out(0), self.stage_out(1), self.stage_out(2)]);
        for s in 0..4 {
            let mut fan_in = ins[s];
            for l in &self.layers[self.stage(s)] {
                if l.inputs != fan_in || l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                    return Err(config_err!("fusion stage {} layer expects {} inputs, chain provides {fan_in}", s + 1, l.inputs));
                }
                fan_in = l.outputs;
            }
        }
        if self.stage_out(3) != 3 * config.gaussians_per_anchor {
            return Err(config_err!("fusion output width {} is not 3k", self.stage_out(3)));
        }
        if !self.omega_r.is_finite() || !self.omega_v.is_finite() {
            return Err(config_err!("residual gains must be finite"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>() + 2
    }

    /// Layer weights and biases in layer order (gains excluded).
    pub fn flatten_layers(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten_layers(&mut self, values: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weight.len(), l.bias.len());
            l.weight.copy_from_slice(&values[at..at + w]);
            l.bias.copy_from_slice(&values[at + w..at + w + b]);
            at += w + b;
        }
    }

    pub fn add_assign(&mut self, other: &HrfnParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        self.omega_r += other.omega_r;
        self.omega_v += other.omega_v;
    }
}

/// Per-anchor inputs of the fusion network.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a> {
    pub position: Vec3,
    pub intrinsic: &'a [f64],
    pub refined: &'a [f64],
    pub global: &'a [f64],
    /// Unit view direction from the camera center to the anchor.
    pub direction: Vec3,
}

/// Layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub layer_inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    /// Sigmoid outputs, `3k` values.
    pub output: Vec<f64>,
}

impl FusionTrace {
    pub fn colors(&self) -> Vec<Vec3> {
        self.output.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub(crate) fn fingerprint(&self, h: &mut Fnv) {
        for z in &self.pre_activations {
            let mut bits = 0usize;
            for (i, v) in z.iter().enumerate() {
                bits = bits.rotate_left(1) ^ ((*v > 0.0) as usize) ^ i;
            }
            h.write(bits);
        }
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn check_input(input: &FusionInput<'_>, params: &HrfnParams) -> Result<()> {
    let pe = 6 * params.pe_frequencies;
    let want = params.layers[0].inputs;
    let got = pe + input.intrinsic.len() + input.refined.len() + input.global.len();
    if got != want {
        return Err(config_err!("fusion input has {got} values, first layer expects {want}"));
    }
    if params.layers[params.stage(1).start].inputs != params.stage_out(0) + input.refined.len()
        || params.layers[params.stage(2).start].inputs != params.stage_out(1) + input.intrinsic.len()
    {
        return Err(config_err!("fusion residual widths do not match the feature sizes"));
    }
    Ok(())
}

/// `k` colors in `(0, 1)³` for one anchor.
pub fn hrfn_forward(input: &FusionInput<'_>, params: &HrfnParams) -> Result<Vec<Vec3>> {
    Ok(forward_traced(input, params)?.colors())
}

pub fn forward_traced(input: &FusionInput<'_>, params: &HrfnParams) -> Result<FusionTrace> {
    check_input(input, params)?;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;

    let mut x = positional_encoding(input.position, params.pe_frequencies);
    x.extend_from_slice(input.intrinsic);
    x.extend_from_slice(input.refined);
    x.extend_from_slice(input.global);
    let mut output = Vec::new();
    for s in 0..4 {
        for li in params.stage(s) {
            let z = params.layers[li].apply(&x);
            layer_inputs.push(core::mem::take(&mut x));
            if li == last {
                output = z.iter().map(|v| sigmoid(*v)).collect();
            } else {
                x = relu(z.clone());
            }
            pre_activations.push(z);
        }
        match s {
            0 => x.extend(input.refined.iter().map(|v| params.omega_r * v)),
            1 => x.extend(input.intrinsic.iter().map(|v| params.omega_v * v)),
            2 => x.extend_from_slice(&input.direction),
            _ => {}
        }
    }
    Ok(FusionTrace { layer_inputs, pre_activations, output })
}

/// Gradients of the per-anchor fusion inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputGrad {
    pub intrinsic: Vec<f64>,
    pub refined: Vec<f64>,
    pub global: Vec<f64>,
}

/// Back-propagates `d_colors` (`k` RGB gradients). Parameter gradients are
/// accumulated into `grad` (shaped by [`HrfnParams::zeros_like`]).
pub fn backward(
    input: &FusionInput<'_>,
    params: &HrfnParams,
    trace: &FusionTrace,
    d_colors: &[Vec3],
    grad: &mut HrfnParams,
) -> FusionInputGrad {
    let last = params.layers.len() - 1;
    let (nv, nr, ng) = (input.intrinsic.len(), input.refined.len(), input.global.len());
    let mut d_intrinsic = vec![0.0; nv];
    let mut d_refined = vec![0.0; nr];

    let mut dy: Vec<f64> = d_colors.iter().flatten().copied().collect();
    for s in (0..4).rev() {
        for li in params.stage(s).rev() {
            let z = &trace.pre_activations[li];
            let dz: Vec<f64> = if li == last {
                dy.iter().zip(&trace.output).map(|(d, y)| d * y * (1.0 - y)).collect()
            } else {
                dy.iter().zip(z).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect()
            };
            dy = params.layers[li].backward(&trace.layer_inputs[li], &dz, &mut grad.layers[li]);
        }
        // dy is now the gradient of this stage's input; peel off the
        // residual block appended after the previous stage.
        match s {
            3 => dy.truncate(dy.len() - 3),
            2 => {
                let split = dy.len() - nv;
                for (i, d) in dy[split..].iter().enumerate() {
                    grad.omega_v += d * input.intrinsic[i];
                    d_intrinsic[i] += d * params.omega_v;
                }
                dy.truncate(split);
            }
            1 => {
                let split = dy.len() - nr;
                for (i, d) in dy[split..].iter().enumerate() {
                    grad.omega_r += d * input.refined[i];
                    d_refined[i] += d * params.omega_r;
                }
                dy.truncate(split);
            }
            _ => {
                let pe = 6 * params.pe_frequencies;
                for i in 0..nv {
                    d_intrinsic[i] += dy[pe + i];
                }
                for i in 0..nr {
                    d_refined[i] += dy[pe + nv + i];
                }
                let global = dy[pe + nv + nr..pe + nv + nr + ng].to_vec();
                return FusionInputGrad { intrinsic: d_intrinsic, refined: d_refined, global };
            }
        }
    }
    unreachable!("stage 0 returns")
}
