use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::sim::StateVector;

use super::Dataset;

/// A contiguous slice of one trajectory, left-padded to the window length.
///
/// Position `k` of every field refers to the same `(trajectory, t)`;
/// padded positions carry `mask == 0` and zeroed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub states: Vec<StateVector>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<f64>,
    pub dones: Vec<bool>,
    /// `(trajectory index, t)` for real positions.
    pub source: Vec<Option<(usize, usize)>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|m| **m > 0.0).count()
    }

    /// Window over `traj[end + 1 - len ..= end]` (clipped at 0), padded to `seq_len`.
    pub fn from_trajectory(ds: &Dataset, traj_idx: usize, end: usize, seq_len: usize) -> Window {
        let traj = &ds.trajectories[traj_idx];
        let start = (end + 1).saturating_sub(seq_len);
        let n_real = end + 1 - start;
        let pad = seq_len - n_real;
        let mut w = Window {
            states: vec![StateVector::default(); pad],
            actions: vec![0.0; pad],
            rewards: vec![0.0; pad],
            rtg: vec![0.0; pad],
            timesteps: vec![0; pad],
            mask: vec![0.0; pad],
            dones: vec![false; pad],
            source: vec![None; pad],
        };
        for t in start..=end {
            let tr = &traj.transitions[t];
            w.states.push(tr.state);
            w.actions.push(tr.action);
            w.rewards.push(traj.rewards.get(t).copied().unwrap_or(0.0));
            w.rtg.push(traj.rtg.get(t).copied().unwrap_or(0.0));
            w.timesteps.push(tr.t);
            w.mask.push(1.0);
            w.dones.push(tr.done);
            w.source.push(Some((traj_idx, t)));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: Vec<Window>,
}

/// Draws windows whose end step is uniform over all logged transitions.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    offsets: Vec<usize>,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, seed: u64) -> Result<Self> {
        contract!(ds.n_transitions() > 0, "dataset is empty");
        let mut offsets = Vec::with_capacity(ds.trajectories.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for t in &ds.trajectories {
            acc += t.len();
            offsets.push(acc);
        }
        Ok(BatchSampler { rng: ChaCha8Rng::seed_from_u64(seed), offsets })
    }

    /// Uniformly pick a logged `(trajectory, t)`.
    pub fn sample_index(&mut self) -> (usize, usize) {
        let total = *self.offsets.last().unwrap();
        let flat = self.rng.gen_range(0..total);
        let traj = self.offsets.partition_point(|o| *o <= flat) - 1;
        (traj, flat - self.offsets[traj])
    }

    pub fn sample(&mut self, ds: &Dataset, batch_size: usize, seq_len: usize) -> Result<Batch> {
        contract!(batch_size > 0, "batch_size must be positive");
        contract!(seq_len > 0, "seq_len must be positive");
        let windows = (0..batch_size)
            .map(|_| {
                let (traj, end) = self.sample_index();
                Window::from_trajectory(ds, traj, end, seq_len)
            })
            .collect();
        Ok(Batch { windows })
    }
}

pub fn sample_batch(ds: &Dataset, batch_size: usize, seq_len: usize, seed: u64) -> Result<Batch> {
    BatchSampler::new(ds, seed)?.sample(ds, batch_size, seq_len)
}
