use alloc::vec::Vec;

use crate::data::Window;
use crate::error::{contract, Result};
use crate::sim::StateVector;

/// Rolling history fed to the sequence networks.
///
/// `actions` holds the actions already taken, so it is one shorter than
/// `states` while a decision is pending. `rtg` is stored pre-scaled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceContext {
    pub states: Vec<StateVector>,
    pub actions: Vec<f64>,
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// Maximum number of timesteps kept.
    pub capacity: usize,
}

impl SequenceContext {
    pub fn new(capacity: usize) -> Self {
        SequenceContext { capacity, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Start a new decision step.
    pub fn push_state(&mut self, state: StateVector, rtg: f64, t: usize) {
        self.states.push(state);
        self.rtg.push(rtg);
        self.timesteps.push(t);
        if self.states.len() > self.capacity.max(1) {
            self.states.remove(0);
            self.rtg.remove(0);
            self.timesteps.remove(0);
            if !self.actions.is_empty() {
                self.actions.remove(0);
            }
        }
    }

    /// Record the action executed for the pending state.
    pub fn push_action(&mut self, action: f64) {
        self.actions.push(action);
    }

    /// The decision pending at the last state: states K, actions K-1.
    pub fn validate(&self) -> Result<()> {
        contract!(!self.states.is_empty(), "context has no state");
        contract!(self.actions.len() + 1 == self.states.len(), "context has {} actions for {} states", self.actions.len(), self.states.len());
        contract!(self.rtg.len() == self.states.len() && self.timesteps.len() == self.states.len(), "misaligned context fields");
        contract!(self.rtg.iter().all(|r| r.is_finite()), "non-finite rtg");
        contract!(self.actions.iter().all(|a| a.is_finite()), "non-finite action in history");
        Ok(())
    }

    /// Context for deciding position `k` of a window, skipping padding.
    /// `rtg_scale` divides the window's raw returns-to-go.
    pub fn from_window(w: &Window, k: usize, rtg_scale: f64) -> Self {
        let first = w.mask.iter().position(|m| *m > 0.0).unwrap_or(k).min(k);
        SequenceContext {
            states: w.states[first..=k].to_vec(),
            actions: w.actions[first..k].to_vec(),
            rtg: w.rtg[first..=k].iter().map(|r| r / rtg_scale).collect(),
            timesteps: w.timesteps[first..=k].to_vec(),
            capacity: w.len(),
        }
    }
}
