//! Hand-written bidding controllers used as behavior policies and baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;

use super::agent::BiddingAgent;

use super::config::{ActionMode, EnvConfig};
use super::features::StateVector;
use super::types::RewardComponents;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScriptedPolicy {
    /// Never bids.
    ZeroBid,
    /// Fixed coefficient, optionally jittered per step.
    ConstantLambda { lambda: f64, noise: f64 },
    /// Multiplicative budget-pacing controller. With `cpa_aware` the
    /// coefficient is additionally capped by a CPA feedback term.
    Pacing { initial: f64, gain: f64, cpa_aware: bool, noise: f64 },
}

impl ScriptedPolicy {
    pub fn name(&self) -> alloc::string::String {
        use alloc::format;
        match self {
            ScriptedPolicy::ZeroBid => "zero-bid".into(),
            ScriptedPolicy::ConstantLambda { lambda, .. } => format!("constant-{lambda}"),
            ScriptedPolicy::Pacing { cpa_aware: true, .. } => "oracle-pacing".into(),
            ScriptedPolicy::Pacing { .. } => "noisy-pacing".into(),
        }
    }

    /// Well-tuned budget and CPA pacing, the strongest scripted bidder.
    pub fn oracle_pacing(config: &EnvConfig) -> Self {
        ScriptedPolicy::Pacing { initial: 1.2 * config.cpa_constraint, gain: 0.5, cpa_aware: true, noise: 0.0 }
    }

    /// Default behavior mix spanning quality levels, each jittered so the
    /// logged actions cover a neighbourhood of the controller's choice.
    pub fn behavior_mix(config: &EnvConfig) -> alloc::vec::Vec<Self> {
        let c = config.cpa_constraint;
        alloc::vec![
            ScriptedPolicy::ConstantLambda { lambda: 0.8 * c, noise: 0.3 },
            ScriptedPolicy::ConstantLambda { lambda: 1.2 * c, noise: 0.3 },
            ScriptedPolicy::Pacing { initial: 1.5 * c, gain: 0.3, cpa_aware: false, noise: 0.3 },
            ScriptedPolicy::Pacing { initial: 1.2 * c, gain: 0.5, cpa_aware: true, noise: 0.3 },
            ScriptedPolicy::Pacing { initial: c, gain: 0.5, cpa_aware: true, noise: 0.3 },
        ]
    }
}

/// Running instance of a [`ScriptedPolicy`] for one period.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    policy: ScriptedPolicy,
    mode: ActionMode,
    budget: f64,
    cpa_bound: f64,
    period_length: usize,
    lambda_max: f64,
    lambda: f64,
    cpa_cap: f64,
    spent: f64,
    conversions: f64,
    last_spend: Option<f64>,
    applied: f64,
    initial: f64,
    rng: ChaCha8Rng,
}

impl ScriptedAgent {
    pub fn new(policy: ScriptedPolicy, config: &EnvConfig, budget: f64, seed: u64) -> Self {
        let initial = match policy {
            ScriptedPolicy::ZeroBid => 0.0,
            ScriptedPolicy::ConstantLambda { lambda, .. } => lambda,
            ScriptedPolicy::Pacing { initial, .. } => initial,
        };
        ScriptedAgent {
            policy,
            mode: config.action_mode,
            budget,
            cpa_bound: config.cpa_constraint,
            period_length: config.period_length,
            lambda_max: config.lambda_max,
            lambda: initial,
            cpa_cap: f64::INFINITY,
            spent: 0.0,
            conversions: 0.0,
            last_spend: None,
            applied: 0.0,
            initial,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }

    /// Coefficient the agent wants this step (before conversion to an action).
    fn target_lambda(&mut self, step: usize) -> f64 {
        let (base, noise) = match self.policy {
            ScriptedPolicy::ZeroBid => return 0.0,
            ScriptedPolicy::ConstantLambda { lambda, noise } => (lambda, noise),
            ScriptedPolicy::Pacing { initial, gain, cpa_aware, noise } => {
                if let Some(last) = self.last_spend {
                    let steps_left = self.period_length.saturating_sub(step).max(1) as f64;
                    let ideal = (self.budget - self.spent).max(0.0) / steps_left;
                    let ratio = if last > 0.0 { ideal / last } else { 2.0 };
                    self.lambda *= math::powf(ratio.clamp(0.5, 2.0), gain);
                    if cpa_aware && self.conversions > 0.0 {
                        let cpa = self.spent / self.conversions;
                        let ratio = (self.cpa_bound / cpa).clamp(0.5, 2.0);
                        self.cpa_cap = initial * ratio * ratio;
                    }
                }
                self.lambda = self.lambda.clamp(0.0, self.lambda_max);
                (self.lambda.min(self.cpa_cap), noise)
            }
        };
        let jitter = if noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            math::exp(noise * z)
        } else {
            1.0
        };
        (base * jitter).clamp(0.0, self.lambda_max)
    }

    pub fn observe_reward(&mut self, reward: &RewardComponents) {
        self.spent += reward.spend;
        self.conversions += reward.perf.first().copied().unwrap_or(0.0);
        self.last_spend = Some(reward.spend);
    }
}

impl BiddingAgent for ScriptedAgent {
    fn reset(&mut self, episode_seed: u64) {
        self.lambda = self.initial;
        self.cpa_cap = f64::INFINITY;
        self.spent = 0.0;
        self.conversions = 0.0;
        self.last_spend = None;
        self.applied = 0.0;
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed);
    }

    fn act(&mut self, step: usize, _state: &StateVector) -> Result<f64> {
        let target = self.target_lambda(step);
        let action = match self.mode {
            ActionMode::Absolute => target,
            ActionMode::Increment => target - self.applied,
        };
        self.applied = target;
        Ok(action)
    }

    fn observe(&mut self, _action: f64, reward: &RewardComponents) {
        self.observe_reward(reward);
    }

    fn set_budget(&mut self, budget: f64) {
        self.budget = budget;
    }
}
