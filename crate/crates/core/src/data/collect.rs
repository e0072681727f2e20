use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::mix_seed;
use crate::sim::{run_episode, EnvConfig, ScriptedAgent, ScriptedPolicy};

use super::{Dataset, Trajectory, Transition};

/// Roll every behavior policy through `n_periods` periods.
///
/// Period `p` uses the same impression stream for all policies; the policy
/// index becomes the trajectory's `advertiser_id`.
pub fn collect_dataset(
    behaviors: &[ScriptedPolicy],
    config: &EnvConfig,
    n_periods: usize,
    seed: u64,
) -> Result<Dataset> {
    collect_dataset_with_budgets(behaviors, config, &[1.0], n_periods, seed)
}

/// As [`collect_dataset`], with period `p` run at budget
/// `config.budget * budget_fracs[p % budget_fracs.len()]`.
pub fn collect_dataset_with_budgets(
    behaviors: &[ScriptedPolicy],
    config: &EnvConfig,
    budget_fracs: &[f64],
    n_periods: usize,
    seed: u64,
) -> Result<Dataset> {
    if behaviors.is_empty() {
        return Err(Error::Config("at least one behavior policy is required".into()));
    }
    if budget_fracs.is_empty() || budget_fracs.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::Config("budget fractions must be positive and finite".into()));
    }
    let base = config.profile();
    let mut trajectories = Vec::with_capacity(n_periods * behaviors.len());
    for period in 0..n_periods {
        let env_seed = mix_seed(seed, period as u64);
        let profile = base.with_budget(config.budget * budget_fracs[period % budget_fracs.len()]);
        for (idx, policy) in behaviors.iter().enumerate() {
            let mut agent = ScriptedAgent::new(*policy, config, profile.budget, 0);
            let log = run_episode(&mut agent, &profile, config, env_seed, mix_seed(env_seed, 1_000 + idx as u64))?;
            let transitions = log
                .steps
                .into_iter()
                .map(|s| Transition {
                    period_id: period as u64,
                    advertiser_id: idx as u64,
                    t: s.t,
                    state: s.state,
                    action: s.action,
                    reward: s.reward,
                    done: s.done,
                })
                .collect();
            trajectories.push(Trajectory::new(transitions)?);
        }
    }
    Ok(Dataset { trajectories, constraints: base.bounds(), seed })
}
