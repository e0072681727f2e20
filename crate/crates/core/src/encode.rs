//! Shared input encoding for the policy and critic networks.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, AttentionScope, Matrix, NetworkSpec, SeqInput};
use crate::data::{Dataset, Window};
use crate::policy::SequenceContext;
use crate::math;
use crate::sim::{StateVector, STATE_DIM};

/// Architecture knobs shared by policy and critic networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    /// Timesteps per window.
    pub context: usize,
    pub max_timestep: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { n_layers: 2, n_heads: 4, hidden: 64, context: 20, max_timestep: 48 }
    }
}

impl ArchConfig {
    /// `(R_t, s_t, a_t)` tokens, action predicted at the state token.
    pub fn policy_spec(&self) -> NetworkSpec {
        self.spec(vec![("rtg".to_string(), 1), ("state".to_string(), STATE_DIM), ("action".to_string(), 1)], "state", AttentionScope::Causal)
    }

    /// `(s_t, a_t)` tokens; Q is read at the action token, V at the state token.
    pub fn critic_spec(&self, readout: &str, scope: AttentionScope) -> NetworkSpec {
        self.spec(vec![("state".to_string(), STATE_DIM), ("action".to_string(), 1)], readout, scope)
    }

    fn spec(&self, input_dims: Vec<(alloc::string::String, usize)>, readout: &str, scope: AttentionScope) -> NetworkSpec {
        NetworkSpec {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            hidden: self.hidden,
            context_tokens: self.context,
            input_dims,
            readout: readout.to_string(),
            output_dim: 1,
            activation: Activation::Relu,
            max_timestep: self.max_timestep,
            scope,
        }
    }
}

/// Per-feature standardization fitted on logged states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNormalizer {
    pub fn identity() -> Self {
        StateNormalizer { mean: vec![0.0; STATE_DIM], std: vec![1.0; STATE_DIM] }
    }

    pub fn fit(ds: &Dataset) -> Self {
        let mut mean = vec![0.0; STATE_DIM];
        let mut sq = vec![0.0; STATE_DIM];
        let mut n = 0.0;
        for tr in ds.transitions() {
            for (i, x) in tr.state.0.iter().enumerate() {
                mean[i] += x;
                sq[i] += x * x;
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Self::identity();
        }
        let std = (0..STATE_DIM)
            .map(|i| {
                mean[i] /= n;
                let var = (sq[i] / n - mean[i] * mean[i]).max(0.0);
                let s = math::sqrt(var);
                if s > 1e-8 { s } else { 1.0 }
            })
            .collect();
        StateNormalizer { mean, std }
    }

    pub fn apply(&self, s: &StateVector) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = (s.0[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    /// `rows x 16` matrix; `None` rows (padding) are zero.
    pub fn matrix<'a>(&self, states: impl Iterator<Item = Option<&'a StateVector>>) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for s in states {
            match s {
                Some(s) => data.extend_from_slice(&self.apply(s)),
                None => data.extend_from_slice(&[0.0; STATE_DIM]),
            }
            rows += 1;
        }
        Matrix::from_vec(rows, STATE_DIM, data)
    }
}

/// Mean absolute logged action, used to bring actions to unit scale.
pub fn action_scale(ds: &Dataset) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for tr in ds.transitions() {
        s += math::abs(tr.action);
        n += 1.0;
    }
    if n == 0.0 || s == 0.0 {
        1.0
    } else {
        s / n
    }
}

pub fn column(values: impl Iterator<Item = f64>) -> Matrix {
    let data: Vec<f64> = values.collect();
    Matrix::from_vec(data.len(), 1, data)
}

/// Turns windows and live contexts into network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub normalizer: StateNormalizer,
    pub action_scale: f64,
    pub rtg_scale: f64,
}

impl Encoder {
    pub fn fit(ds: &Dataset, rtg_scale: f64) -> Self {
        Encoder { normalizer: StateNormalizer::fit(ds), action_scale: action_scale(ds), rtg_scale }
    }

    fn states(&self, states: &[StateVector]) -> Matrix {
        self.normalizer.matrix(states.iter().map(Some))
    }

    fn actions(&self, actions: impl Iterator<Item = f64>) -> Matrix {
        column(actions.map(|a| a / self.action_scale))
    }

    /// `(state, action)` roles over a whole window.
    pub fn critic_window(&self, w: &Window) -> SeqInput {
        SeqInput {
            features: vec![self.states(&w.states), self.actions(w.actions.iter().copied())],
            timesteps: w.timesteps.clone(),
            mask: w.mask.iter().map(|m| *m > 0.0).collect(),
        }
    }

    /// History plus the pending state, with `candidate` as its action.
    /// Only the last `limit` timesteps of `ctx` are kept.
    pub fn critic_context(&self, ctx: &SequenceContext, candidate: f64, limit: usize) -> SeqInput {
        let start = ctx.len().saturating_sub(limit.max(1));
        let actions = ctx.actions[start..].iter().copied().chain(core::iter::once(candidate));
        SeqInput {
            features: vec![self.states(&ctx.states[start..]), self.actions(actions)],
            timesteps: ctx.timesteps[start..].to_vec(),
            mask: vec![true; ctx.len() - start],
        }
    }

    /// `(rtg, state, action)` roles over a whole window.
    pub fn policy_window(&self, w: &Window) -> SeqInput {
        SeqInput {
            features: vec![
                column(w.rtg.iter().map(|r| r / self.rtg_scale)),
                self.states(&w.states),
                self.actions(w.actions.iter().copied()),
            ],
            timesteps: w.timesteps.clone(),
            mask: w.mask.iter().map(|m| *m > 0.0).collect(),
        }
    }

    /// The pending action token is a zero placeholder; the readout at the
    /// state token cannot see it.
    pub fn policy_context(&self, ctx: &SequenceContext) -> SeqInput {
        let actions = ctx.actions.iter().copied().chain(core::iter::once(0.0));
        SeqInput {
            features: vec![column(ctx.rtg.iter().copied()), self.states(&ctx.states), self.actions(actions)],
            timesteps: ctx.timesteps.clone(),
            mask: vec![true; ctx.len()],
        }
    }
}
