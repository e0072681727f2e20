use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math;

use super::matrix::Matrix;
use super::params::ParameterSet;
use super::tape::{AttentionScope, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Shape of a token-sequence network.
///
/// Each timestep contributes one token per input role, in the order of
/// `input_dims`; outputs are read at the tokens of the `readout` role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    /// Timesteps per window.
    pub context_tokens: usize,
    pub input_dims: Vec<(String, usize)>,
    pub readout: String,
    pub output_dim: usize,
    pub activation: Activation,
    /// Size of the learned timestep embedding table.
    pub max_timestep: usize,
    pub scope: AttentionScope,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        contract!(self.n_layers >= 1 && self.n_heads >= 1 && self.hidden >= 1, "dimensions must be >= 1");
        contract!(self.hidden % self.n_heads == 0, "hidden {} not divisible by {} heads", self.hidden, self.n_heads);
        contract!(self.context_tokens >= 1 && self.output_dim >= 1 && self.max_timestep >= 1, "dimensions must be >= 1");
        contract!(!self.input_dims.is_empty(), "at least one input role");
        contract!(self.input_dims.iter().all(|(_, d)| *d >= 1), "input dims must be >= 1");
        contract!(self.readout_index().is_some(), "readout role {} is not an input role", self.readout);
        Ok(())
    }

    pub fn readout_index(&self) -> Option<usize> {
        self.input_dims.iter().position(|(r, _)| *r == self.readout)
    }

    pub fn role_dim(&self, role: &str) -> Option<usize> {
        self.input_dims.iter().find(|(r, _)| r == role).map(|(_, d)| *d)
    }
}

/// Inputs for one window: a `T x dim` matrix per role, timesteps and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub features: Vec<Matrix>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SeqInput {
    /// Prepend masked zero positions up to `len`.
    pub fn left_pad(&self, len: usize) -> SeqInput {
        let pad = len.saturating_sub(self.len());
        if pad == 0 {
            return self.clone();
        }
        let features = self
            .features
            .iter()
            .map(|m| {
                let mut data = vec![0.0; pad * m.cols];
                data.extend_from_slice(&m.data);
                Matrix::from_vec(pad + m.rows, m.cols, data)
            })
            .collect();
        let mut timesteps = vec![0; pad];
        timesteps.extend_from_slice(&self.timesteps);
        let mut mask = vec![false; pad];
        mask.extend_from_slice(&self.mask);
        SeqInput { features, timesteps, mask }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

/// Offsets of (weight, bias) or (gain, bias) pairs in the flat vector.
#[derive(Debug, Clone, PartialEq)]
struct Offsets {
    embed: Vec<(usize, usize)>,
    time: usize,
    layers: Vec<LayerOffsets>,
    ln_f: (usize, usize),
    head: (usize, usize),
}

/// Pre-norm causal transformer over interleaved per-timestep tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqNet {
    pub spec: NetworkSpec,
    offsets: Offsets,
}

const HEAD_GAIN: f64 = 0.01;
const EMBED_RANGE: f64 = 0.1;

impl SeqNet {
    /// Build the network and a freshly initialized parameter set.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<(SeqNet, ParameterSet)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let h = spec.hidden;
        let mut linear = |p: &mut ParameterSet, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let bound = gain / math::sqrt(fan_in as f64);
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let wi = p.push(alloc::format!("{name}.weight"), vec![fan_in, fan_out], w);
            let bi = p.push(alloc::format!("{name}.bias"), vec![1, fan_out], vec![0.0; fan_out]);
            (p.tensors[wi].offset, p.tensors[bi].offset)
        };
        let mut embed = Vec::new();
        for (role, dim) in &spec.input_dims {
            embed.push(linear(&mut p, &alloc::format!("embed.{role}"), *dim, h, 1.0));
        }
        let norm = |p: &mut ParameterSet, name: &str| {
            let g = p.push(alloc::format!("{name}.gain"), vec![1, h], vec![1.0; h]);
            let b = p.push(alloc::format!("{name}.bias"), vec![1, h], vec![0.0; h]);
            (p.tensors[g].offset, p.tensors[b].offset)
        };
        let mut layers = Vec::new();
        for l in 0..spec.n_layers {
            let ln1 = norm(&mut p, &alloc::format!("layer{l}.ln1"));
            let wq = linear(&mut p, &alloc::format!("layer{l}.attn.q"), h, h, 1.0);
            let wk = linear(&mut p, &alloc::format!("layer{l}.attn.k"), h, h, 1.0);
            let wv = linear(&mut p, &alloc::format!("layer{l}.attn.v"), h, h, 1.0);
            let wo = linear(&mut p, &alloc::format!("layer{l}.attn.out"), h, h, 1.0);
            let ln2 = norm(&mut p, &alloc::format!("layer{l}.ln2"));
            let ff1 = linear(&mut p, &alloc::format!("layer{l}.ff.in"), h, 4 * h, 1.0);
            let ff2 = linear(&mut p, &alloc::format!("layer{l}.ff.out"), 4 * h, h, 1.0);
            layers.push(LayerOffsets { ln1, wq, wk, wv, wo, ln2, ff1, ff2 });
        }
        let ln_f = norm(&mut p, "ln_f");
        let head = linear(&mut p, "head", h, spec.output_dim, HEAD_GAIN);
        let table: Vec<f64> = (0..spec.max_timestep * h).map(|_| rng.gen_range(-EMBED_RANGE..=EMBED_RANGE)).collect();
        let ti = p.push("time_embed", vec![spec.max_timestep, h], table);
        let time = p.tensors[ti].offset;
        let net = SeqNet { spec, offsets: Offsets { embed, time, layers, ln_f, head } };
        Ok((net, p))
    }

    /// Recover the offsets for an existing parameter set (e.g. a loaded checkpoint).
    pub fn from_params(spec: NetworkSpec, params: &ParameterSet) -> Result<SeqNet> {
        let (net, fresh) = SeqNet::init(spec, 0)?;
        contract!(fresh.same_layout(params), "parameter layout does not match the network spec");
        Ok(net)
    }

    pub fn check_input(&self, input: &SeqInput) -> Result<()> {
        let t = input.len();
        contract!(t >= 1, "empty input sequence");
        contract!(t <= self.spec.context_tokens, "sequence of {t} exceeds context {}", self.spec.context_tokens);
        contract!(input.mask.len() == t, "mask length {} vs {t}", input.mask.len());
        contract!(input.features.len() == self.spec.input_dims.len(), "expected {} roles", self.spec.input_dims.len());
        for (m, (role, dim)) in input.features.iter().zip(&self.spec.input_dims) {
            contract!(m.rows == t && m.cols == *dim, "role {role}: got {}x{}, expected {t}x{dim}", m.rows, m.cols);
        }
        contract!(
            input.timesteps.iter().all(|s| *s < self.spec.max_timestep),
            "timestep beyond embedding table of {}",
            self.spec.max_timestep
        );
        Ok(())
    }

    /// Record the forward pass on `tape`; the returned node is `T x output_dim`.
    pub fn build(&self, tape: &mut Tape, params: &ParameterSet, input: &SeqInput) -> Result<Var> {
        self.build_batch(tape, params, core::slice::from_ref(input))
    }

    /// Forward several equal-length sequences in one pass. Row `b * T + t`
    /// of the `(B * T) x output_dim` result belongs to `inputs[b]`.
    pub fn build_batch(&self, tape: &mut Tape, params: &ParameterSet, inputs: &[SeqInput]) -> Result<Var> {
        contract!(!inputs.is_empty(), "empty batch");
        let t = inputs[0].len();
        for input in inputs {
            self.check_input(input)?;
            contract!(input.len() == t, "batched sequences must share one length");
        }
        let pv = &params.values;
        let h = self.spec.hidden;
        let b = inputs.len();
        let n_roles = self.spec.input_dims.len();
        let table = tape.param(pv, self.offsets.time, self.spec.max_timestep, h);
        let steps: Vec<usize> = inputs.iter().flat_map(|i| i.timesteps.iter().copied()).collect();
        let time = tape.gather_rows(table, steps);
        let mut parts = Vec::with_capacity(n_roles);
        for (r, (_, dim)) in self.spec.input_dims.iter().enumerate() {
            let mut data = Vec::with_capacity(b * t * dim);
            for input in inputs {
                data.extend_from_slice(&input.features[r].data);
            }
            let (w, bias) = self.offsets.embed[r];
            let x = tape.input(Matrix::from_vec(b * t, *dim, data));
            let wv = tape.param(pv, w, *dim, h);
            let bv = tape.param(pv, bias, 1, h);
            let e = tape.matmul(x, wv);
            let e = tape.add_row(e, bv);
            parts.push(tape.add(e, time));
        }
        let mut x = if n_roles == 1 { parts[0] } else { tape.interleave(parts) };
        let key_mask: Vec<bool> =
            inputs.iter().flat_map(|i| (0..t * n_roles).map(move |k| i.mask[k / n_roles])).collect();
        let segment = t * n_roles;
        let linear = |tape: &mut Tape, x: Var, (w, b): (usize, usize), fan_in: usize, fan_out: usize| {
            let wv = tape.param(pv, w, fan_in, fan_out);
            let bv = tape.param(pv, b, 1, fan_out);
            let y = tape.matmul(x, wv);
            tape.add_row(y, bv)
        };
        let norm = |tape: &mut Tape, x: Var, (g, b): (usize, usize)| {
            let gv = tape.param(pv, g, 1, h);
            let bv = tape.param(pv, b, 1, h);
            tape.layer_norm(x, gv, bv)
        };
        for lo in &self.offsets.layers {
            let y = norm(tape, x, lo.ln1);
            let q = linear(tape, y, lo.wq, h, h);
            let k = linear(tape, y, lo.wk, h, h);
            let v = linear(tape, y, lo.wv, h, h);
            let a = tape.attention_segmented(q, k, v, self.spec.n_heads, &key_mask, self.spec.scope, segment);
            let a = linear(tape, a, lo.wo, h, h);
            x = tape.add(x, a);
            let y = norm(tape, x, lo.ln2);
            let y = linear(tape, y, lo.ff1, h, 4 * h);
            let y = match self.spec.activation {
                Activation::Relu => tape.relu(y),
            };
            let y = linear(tape, y, lo.ff2, 4 * h, h);
            x = tape.add(x, y);
        }
        let x = norm(tape, x, self.offsets.ln_f);
        let readout = self.spec.readout_index().unwrap_or(0);
        let rows = (0..b * t).map(|s| s * n_roles + readout).collect();
        let x = tape.gather_rows(x, rows);
        Ok(linear(tape, x, self.offsets.head, h, self.spec.output_dim))
    }

    /// Evaluate a batch of equal-length sequences without keeping the tape.
    pub fn forward_batch(&self, params: &ParameterSet, inputs: &[SeqInput]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.build_batch(&mut tape, params, inputs)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluate without keeping the tape.
    pub fn forward(&self, params: &ParameterSet, input: &SeqInput) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, params, input)?;
        Ok(tape.value(out).clone())
    }
}
