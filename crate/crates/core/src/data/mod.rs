//! Logged trajectories, returns-to-go and window sampling.

mod batch;
mod collect;

pub use batch::{sample_batch, Batch, BatchSampler, Window};
pub use collect::{collect_dataset, collect_dataset_with_budgets};

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{RewardComponents, StateVector};

pub const SCHEMA_VERSION: &str = "gas-v1";

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub period_id: u64,
    pub advertiser_id: u64,
    pub t: usize,
    pub state: StateVector,
    pub action: f64,
    pub reward: RewardComponents,
    pub done: bool,
}

/// A time-ordered episode plus the scalar rewards and returns-to-go of the
/// preference currently applied (empty until [`Trajectory::set_rewards`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        for (k, tr) in transitions.iter().enumerate() {
            if tr.t != k {
                return Err(Error::Dataset(alloc::format!("trajectory step {k} has t={}", tr.t)));
            }
            if tr.done && k + 1 != transitions.len() {
                return Err(Error::Dataset(alloc::format!("done flag set before the end at t={k}")));
            }
        }
        Ok(Trajectory { transitions, rewards: Vec::new(), rtg: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>, gamma: f64) {
        self.rtg = compute_rtg(&rewards, gamma);
        self.rewards = rewards;
    }

    /// Undiscounted sum of the applied rewards.
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Suffix sums `rtg[t] = sum_{i >= t} gamma^(i - t) r_i`.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = alloc::vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_trajectories: usize,
    pub n_transitions: usize,
    pub seed: u64,
    pub env_config_hash: String,
    pub schema_version: String,
    pub constraints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    /// Constraint bounds `C_j` of the logged advertiser.
    pub constraints: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Apply a per-step scalar reward to every trajectory and refresh rtg.
    pub fn apply_rewards(&mut self, reward: impl Fn(&RewardComponents) -> f64, gamma: f64) {
        for traj in &mut self.trajectories {
            let rewards = traj.transitions.iter().map(|t| reward(&t.reward)).collect();
            traj.set_rewards(rewards, gamma);
        }
    }

    pub fn has_rewards(&self) -> bool {
        self.trajectories.iter().all(|t| t.rewards.len() == t.len())
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Split by trajectory index: every `k`-th trajectory goes to the second set.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, t) in self.trajectories.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(t.clone());
            } else {
                a.push(t.clone());
            }
        }
        let mk = |trajectories| Dataset { trajectories, constraints: self.constraints.clone(), seed: self.seed };
        (mk(a), mk(b))
    }

    pub fn manifest(&self, env_config_hash: String) -> DatasetManifest {
        DatasetManifest {
            n_trajectories: self.trajectories.len(),
            n_transitions: self.n_transitions(),
            seed: self.seed,
            env_config_hash,
            schema_version: SCHEMA_VERSION.into(),
            constraints: self.constraints.clone(),
        }
    }

    /// Group a flat, ordered transition list into trajectories by
    /// `(period_id, advertiser_id)` runs.
    pub fn from_transitions(transitions: Vec<Transition>, constraints: Vec<f64>, seed: u64) -> Result<Self> {
        let mut trajectories = Vec::new();
        let mut current: Vec<Transition> = Vec::new();
        for tr in transitions {
            let same = current
                .last()
                .map(|p| p.period_id == tr.period_id && p.advertiser_id == tr.advertiser_id && tr.t == p.t + 1)
                .unwrap_or(true);
            if !same {
                trajectories.push(Trajectory::new(core::mem::take(&mut current))?);
            }
            current.push(tr);
        }
        if !current.is_empty() {
            trajectories.push(Trajectory::new(current)?);
        }
        Ok(Dataset { trajectories, constraints, seed })
    }
}
