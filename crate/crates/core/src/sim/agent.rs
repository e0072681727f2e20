use alloc::vec::Vec;

use crate::error::Result;

use super::config::{AdvertiserProfile, EnvConfig};
use super::env::{AuctionEnv, EnvState};
use super::features::StateVector;
use super::types::RewardComponents;

/// Anything that picks one action per step of a period.
pub trait BiddingAgent {
    /// Prepare for a new period; `episode_seed` drives any agent-side randomness.
    fn reset(&mut self, episode_seed: u64);
    fn act(&mut self, step: usize, state: &StateVector) -> Result<f64>;
    fn observe(&mut self, action: f64, reward: &RewardComponents);
    /// Budget of the coming periods, for agents that pace against it.
    fn set_budget(&mut self, _budget: f64) {}
}

impl<A: BiddingAgent + ?Sized> BiddingAgent for &mut A {
    fn reset(&mut self, episode_seed: u64) {
        (**self).reset(episode_seed)
    }

    fn act(&mut self, step: usize, state: &StateVector) -> Result<f64> {
        (**self).act(step, state)
    }

    fn observe(&mut self, action: f64, reward: &RewardComponents) {
        (**self).observe(action, reward)
    }

    fn set_budget(&mut self, budget: f64) {
        (**self).set_budget(budget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: StateVector,
    pub action: f64,
    pub reward: RewardComponents,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub final_state: EnvState,
}

/// Play one full period of `agent` against the stream seeded by `env_seed`.
pub fn run_episode(
    agent: &mut dyn BiddingAgent,
    profile: &AdvertiserProfile,
    config: &EnvConfig,
    env_seed: u64,
    agent_seed: u64,
) -> Result<EpisodeLog> {
    let mut env = AuctionEnv::reset(profile, config, env_seed)?;
    agent.reset(agent_seed);
    let mut steps = Vec::with_capacity(profile.period_length);
    loop {
        let t = env.state().step;
        let state = env.observe();
        let action = agent.act(t, &state)?;
        let out = env.step(action)?;
        agent.observe(action, &out.reward);
        steps.push(StepRecord { t, state, action, reward: out.reward, done: out.done });
        if out.done {
            break;
        }
    }
    Ok(EpisodeLog { steps, final_state: env.state().clone() })
}
