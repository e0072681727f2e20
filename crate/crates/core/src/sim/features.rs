use serde::{Deserialize, Serialize};

use super::env::{EnvState, StepLog};

pub const STATE_DIM: usize = 16;

pub const FEATURE_NAMES: [&str; STATE_DIM] = [
    "time_left",
    "budget_left",
    "historical_bid_mean",
    "last_three_bid_mean",
    "historical_LeastWinningCost_mean",
    "historical_pValues_mean",
    "historical_conversion_mean",
    "historical_xi_mean",
    "last_three_LeastWinningCost_mean",
    "last_three_pValues_mean",
    "last_three_conversion_mean",
    "last_three_xi_mean",
    "current_pValues_mean",
    "current_pv_num",
    "last_three_pv_num_total",
    "historical_pv_num_total",
];

/// The 16 observation features, in the fixed order of [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl Default for StateVector {
    fn default() -> Self {
        StateVector([0.0; STATE_DIM])
    }
}

impl StateVector {
    pub fn time_left(&self) -> f64 {
        self.0[0]
    }

    pub fn budget_left(&self) -> f64 {
        self.0[1]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn mean_of(logs: &[StepLog], f: impl Fn(&StepLog) -> f64) -> f64 {
    if logs.is_empty() {
        0.0
    } else {
        logs.iter().map(f).sum::<f64>() / logs.len() as f64
    }
}

/// Observation for the step about to be played.
///
/// Historical means run over all completed steps, "last three" over the most
/// recent three (fewer early in the period); empty histories give 0.
pub fn build_state_features(env: &EnvState) -> StateVector {
    let t_total = env.period_length as f64;
    let logs = &env.logs[..];
    let recent = &logs[logs.len().saturating_sub(3)..];
    let current_pv = env.current.len();
    let current_p = if current_pv == 0 {
        0.0
    } else {
        env.current.iter().map(|i| i.value).sum::<f64>() / current_pv as f64
    };
    let time_left = ((t_total - env.step as f64) / t_total).clamp(0.0, 1.0);
    let budget_left = ((env.budget - env.budget_spent) / env.budget).clamp(0.0, 1.0);
    StateVector([
        time_left,
        budget_left,
        mean_of(logs, |l| l.bid_mean),
        mean_of(recent, |l| l.bid_mean),
        mean_of(logs, |l| l.least_winning_cost_mean),
        mean_of(logs, |l| l.pvalue_mean),
        mean_of(logs, |l| l.conversions),
        mean_of(logs, |l| l.win_rate),
        mean_of(recent, |l| l.least_winning_cost_mean),
        mean_of(recent, |l| l.pvalue_mean),
        mean_of(recent, |l| l.conversions),
        mean_of(recent, |l| l.win_rate),
        current_p,
        current_pv as f64,
        recent.iter().map(|l| l.pv_num as f64).sum(),
        logs.iter().map(|l| l.pv_num as f64).sum(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AuctionEnv, EnvConfig};

    fn fresh() -> EnvState {
        let cfg = EnvConfig { impressions_per_step: 50, budget: 100.0, ..EnvConfig::default() };
        AuctionEnv::reset(&cfg.profile(), &cfg, 7).unwrap().state().clone()
    }

    fn log(bid: f64, lwc: f64, p: f64, conv: f64, xi: f64, pv: u64) -> StepLog {
        StepLog { bid_mean: bid, least_winning_cost_mean: lwc, pvalue_mean: p, conversions: conv, win_rate: xi, pv_num: pv }
    }

    #[test]
    fn fresh_env_features() {
        let s = build_state_features(&fresh());
        assert_eq!(s.time_left(), 1.0);
        assert_eq!(s.budget_left(), 1.0);
        for i in 2..12 {
            assert_eq!(s.0[i], 0.0, "{}", FEATURE_NAMES[i]);
        }
        assert_eq!(s.get("current_pv_num"), Some(50.0));
        assert_eq!(s.get("historical_pv_num_total"), Some(0.0));
    }

    #[test]
    fn three_step_bid_means() {
        let mut env = fresh();
        env.logs = [1.0, 2.0, 3.0].iter().map(|b| log(*b, 0.0, 0.0, 0.0, 0.0, 10)).collect();
        env.step = 3;
        let s = build_state_features(&env);
        assert_eq!(s.get("historical_bid_mean"), Some(2.0));
        assert_eq!(s.get("last_three_bid_mean"), Some(2.0));
    }

    #[test]
    fn hand_computed_five_step_fixture() {
        let mut env = fresh();
        env.logs = alloc::vec![
            log(10.0, 4.0, 0.2, 3.0, 0.1, 100),
            log(12.0, 5.0, 0.3, 1.0, 0.2, 120),
            log(8.0, 6.0, 0.1, 0.0, 0.0, 80),
            log(20.0, 7.0, 0.4, 6.0, 0.5, 90),
            log(5.0, 3.0, 0.25, 2.0, 0.3, 110),
        ];
        env.step = 5;
        env.period_length = 48;
        env.budget = 100.0;
        env.budget_spent = 40.0;
        let s = build_state_features(&env);
        let current_p = env.current.iter().map(|i| i.value).sum::<f64>() / 50.0;
        let expected = [
            43.0 / 48.0,
            0.6,
            55.0 / 5.0,
            33.0 / 3.0,
            25.0 / 5.0,
            1.25 / 5.0,
            12.0 / 5.0,
            1.1 / 5.0,
            16.0 / 3.0,
            0.75 / 3.0,
            8.0 / 3.0,
            0.8 / 3.0,
            current_p,
            50.0,
            280.0,
            500.0,
        ];
        for (i, e) in expected.iter().enumerate() {
            assert!((s.0[i] - e).abs() < 1e-12, "{}: {} vs {}", FEATURE_NAMES[i], s.0[i], e);
        }
    }
}
