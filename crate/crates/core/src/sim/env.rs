use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;

use super::auction::{compute_bid, run_auction};
use super::config::{ActionMode, AdvertiserProfile, EnvConfig, IndicatorKind};
use super::features::{build_state_features, StateVector};
use super::types::{ImpressionOpportunity, RewardComponents};

/// Weight of the true impression value in an opponent's valuation; the rest
/// is the opponent's own independent draw.
const OPPONENT_VALUE_SHARE: f64 = 0.5;
/// Log-normal spread of an opponent's valuation.
const OPPONENT_NOISE: f64 = 0.3;
/// Relative swing of a pacing opponent's coefficient over the period.
const PACING_AMPLITUDE: f64 = 0.4;

/// Aggregates of one completed step, used for the state features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub bid_mean: f64,
    pub least_winning_cost_mean: f64,
    pub pvalue_mean: f64,
    pub conversions: f64,
    pub win_rate: f64,
    pub pv_num: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Opponent {
    coefficient: f64,
    /// Phase of the pacing curve; `None` for constant bidders.
    phase: Option<f64>,
}

impl Opponent {
    fn coefficient_at(&self, step: usize, period_length: usize) -> f64 {
        match self.phase {
            None => self.coefficient,
            Some(phase) => {
                let angle = 2.0 * PI * step as f64 / period_length as f64 + phase;
                self.coefficient * (1.0 + PACING_AMPLITUDE * math::sin(angle))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub step: usize,
    pub period_length: usize,
    pub budget: f64,
    pub budget_spent: f64,
    pub wins: u64,
    pub value_won: f64,
    pub constraint_cost_sums: Vec<f64>,
    pub constraint_perf_sums: Vec<f64>,
    /// Current bid coefficient.
    pub lambda: f64,
    pub logs: Vec<StepLog>,
    /// Impressions of the step about to be played (empty once done).
    pub current: Vec<ImpressionOpportunity>,
    pub done: bool,
    rng: ChaCha8Rng,
    opponents: Vec<Opponent>,
}

impl EnvState {
    /// Seed the impression generator was created from.
    pub fn rng_seed(&self) -> [u8; 32] {
        self.rng.get_seed()
    }

    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn remaining_budget(&self) -> f64 {
        (self.budget - self.budget_spent).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: StateVector,
    pub reward: RewardComponents,
    pub done: bool,
}

/// One advertiser bidding through one period.
#[derive(Debug, Clone)]
pub struct AuctionEnv {
    config: EnvConfig,
    profile: AdvertiserProfile,
    value_dist: Beta<f64>,
    state: EnvState,
}

impl AuctionEnv {
    pub fn reset(profile: &AdvertiserProfile, config: &EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        profile.validate()?;
        let value_dist = Beta::new(config.value_dist.a, config.value_dist.b)
            .map_err(|e| Error::Config(alloc::format!("value distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let market = rng.gen_range(0.85..1.15);
        let mix = config.opponent_mix;
        let opponents = (0..mix.total())
            .map(|k| {
                let coefficient = config.cpa_constraint * market * rng.gen_range(0.8..1.3);
                let phase = (k >= mix.constant).then(|| rng.gen_range(0.0..2.0 * PI));
                Opponent { coefficient, phase }
            })
            .collect();
        let j = profile.constraints.len();
        let state = EnvState {
            step: 0,
            period_length: profile.period_length,
            budget: profile.budget,
            budget_spent: 0.0,
            wins: 0,
            value_won: 0.0,
            constraint_cost_sums: vec![0.0; j],
            constraint_perf_sums: vec![0.0; j],
            lambda: 0.0,
            logs: Vec::with_capacity(profile.period_length),
            current: Vec::new(),
            done: false,
            rng,
            opponents,
        };
        let mut env = AuctionEnv { config: config.clone(), profile: profile.clone(), value_dist, state };
        env.state.current = env.generate_impressions()?;
        Ok(env)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn profile(&self) -> &AdvertiserProfile {
        &self.profile
    }

    pub fn observe(&self) -> StateVector {
        build_state_features(&self.state)
    }

    /// Draw the impressions of the current step.
    pub fn generate_impressions(&mut self) -> Result<Vec<ImpressionOpportunity>> {
        let st = &mut self.state;
        if st.step >= st.period_length {
            return Err(Error::OutOfEpisode { step: st.step, period_length: st.period_length });
        }
        let coefficients: Vec<f64> =
            st.opponents.iter().map(|o| o.coefficient_at(st.step, st.period_length)).collect();
        let mut out = Vec::with_capacity(self.config.impressions_per_step);
        for index in 0..self.config.impressions_per_step {
            let value: f64 = self.value_dist.sample(&mut st.rng);
            let conversion_draw: f64 = st.rng.gen();
            let competitor_bids: Vec<f64> = coefficients
                .iter()
                .map(|c| {
                    let own: f64 = self.value_dist.sample(&mut st.rng);
                    let z: f64 = StandardNormal.sample(&mut st.rng);
                    let estimate = OPPONENT_VALUE_SHARE * value + (1.0 - OPPONENT_VALUE_SHARE) * own;
                    c * estimate * math::exp(OPPONENT_NOISE * z)
                })
                .collect();
            let price = competitor_bids.iter().copied().fold(0.0, f64::max);
            let converted = if conversion_draw < value { 1.0 } else { 0.0 };
            let perf_indicators = self
                .profile
                .constraints
                .iter()
                .map(|c| match c.kind {
                    IndicatorKind::Conversion => converted,
                    IndicatorKind::Constant => 1.0,
                })
                .collect();
            out.push(ImpressionOpportunity {
                index,
                value,
                competitor_bids,
                perf_indicators,
                constraint_costs: vec![price; self.profile.constraints.len()],
                conversion_draw,
            });
        }
        Ok(out)
    }

    /// Apply `action` to the coefficient and clear every impression of the step.
    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if self.state.done || self.state.step >= self.state.period_length {
            return Err(Error::OutOfEpisode { step: self.state.step, period_length: self.state.period_length });
        }
        if !action.is_finite() {
            return Err(Error::Contract(alloc::format!("action must be finite, got {action}")));
        }
        let lambda = match self.config.action_mode {
            ActionMode::Absolute => action,
            ActionMode::Increment => self.state.lambda + action,
        }
        .clamp(0.0, self.config.lambda_max);
        self.state.lambda = lambda;

        let j = self.profile.constraints.len();
        let mut coeffs = vec![0.0; j + 1];
        coeffs[0] = lambda;
        let bounds = self.profile.bounds();
        let mut reward = RewardComponents::zeros(j);
        let mut exhausted = false;
        let impressions = core::mem::take(&mut self.state.current);
        let (mut bid_sum, mut lwc_sum, mut p_sum, mut conversions) = (0.0, 0.0, 0.0, 0.0);
        for imp in &impressions {
            let bid = compute_bid(&coeffs, imp, &bounds)?;
            let remaining = self.state.budget - self.state.budget_spent;
            let out = run_auction(bid, imp, remaining);
            bid_sum += bid;
            lwc_sum += imp.max_competitor_bid();
            p_sum += imp.value;
            if !out.won && bid > imp.max_competitor_bid() {
                exhausted = true;
            }
            if out.won {
                self.state.budget_spent += out.cost;
                reward.spend += out.cost;
                reward.value += imp.value;
                reward.wins += 1;
                if out.conversion {
                    conversions += 1.0;
                }
                for k in 0..j {
                    reward.cost[k] += imp.constraint_costs[k];
                    reward.perf[k] += imp.perf_indicators[k];
                }
            }
        }
        let n = impressions.len().max(1) as f64;
        self.state.logs.push(StepLog {
            bid_mean: bid_sum / n,
            least_winning_cost_mean: lwc_sum / n,
            pvalue_mean: p_sum / n,
            conversions,
            win_rate: reward.wins as f64 / n,
            pv_num: impressions.len() as u64,
        });
        self.state.wins += reward.wins;
        self.state.value_won += reward.value;
        for k in 0..j {
            self.state.constraint_cost_sums[k] += reward.cost[k];
            self.state.constraint_perf_sums[k] += reward.perf[k];
        }
        self.state.step += 1;
        if self.state.budget_spent >= self.state.budget {
            exhausted = true;
        }
        let done = exhausted || self.state.step >= self.state.period_length;
        self.state.done = done;
        if !done {
            self.state.current = self.generate_impressions()?;
        }
        Ok(StepOutcome { state: self.observe(), reward, done })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::OpponentMix;

    fn small_config() -> EnvConfig {
        EnvConfig { impressions_per_step: 200, period_length: 48, ..EnvConfig::default() }
    }

    #[test]
    fn reset_is_fresh_and_deterministic() {
        let cfg = EnvConfig { budget: 100.0, ..small_config() };
        let a = AuctionEnv::reset(&cfg.profile(), &cfg, 7).unwrap();
        let b = AuctionEnv::reset(&cfg.profile(), &cfg, 7).unwrap();
        assert_eq!(a.state().step, 0);
        assert_eq!(a.state().budget_spent, 0.0);
        assert!(a.state().logs.is_empty());
        assert_eq!(a.state(), b.state());
        let c = AuctionEnv::reset(&cfg.profile(), &cfg, 8).unwrap();
        assert_ne!(a.state().rng_seed(), c.state().rng_seed());
    }

    #[test]
    fn reset_rejects_bad_budget() {
        let cfg = EnvConfig { budget: 0.0, ..small_config() };
        assert!(matches!(AuctionEnv::reset(&cfg.profile(), &cfg, 1), Err(Error::Config(_))));
        let cfg = EnvConfig { opponent_mix: OpponentMix { constant: 0, pacing: 0 }, ..small_config() };
        assert!(matches!(AuctionEnv::reset(&cfg.profile(), &cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn impressions_have_configured_count() {
        let cfg = EnvConfig { impressions_per_step: 1000, ..small_config() };
        let env = AuctionEnv::reset(&cfg.profile(), &cfg, 3).unwrap();
        assert_eq!(env.state().current.len(), 1000);
        assert!(env.state().current.iter().all(|i| !i.competitor_bids.is_empty() && (0.0..=1.0).contains(&i.value)));
    }

    #[test]
    fn beta_value_mean_in_expected_band() {
        let cfg = EnvConfig { impressions_per_step: 1000, ..small_config() };
        let mut env = AuctionEnv::reset(&cfg.profile(), &cfg, 5).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..100 {
            for imp in env.generate_impressions().unwrap() {
                sum += imp.value;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!((0.15..=0.25).contains(&mean), "mean {mean}");
        assert!((mean - 0.2).abs() < 0.005);
    }

    #[test]
    fn zero_coefficient_wins_nothing() {
        let cfg = small_config();
        let mut env = AuctionEnv::reset(&cfg.profile(), &cfg, 1).unwrap();
        let out = env.step(0.0).unwrap();
        assert_eq!(out.reward.wins, 0);
        assert_eq!(out.reward.value, 0.0);
        assert_eq!(env.state().lambda, 0.0);
    }

    #[test]
    fn increment_mode_accumulates_and_clamps() {
        let cfg = EnvConfig { action_mode: ActionMode::Increment, lambda_max: 50.0, ..small_config() };
        let mut env = AuctionEnv::reset(&cfg.profile(), &cfg, 1).unwrap();
        env.step(30.0).unwrap();
        assert_eq!(env.state().lambda, 30.0);
        env.step(30.0).unwrap();
        assert_eq!(env.state().lambda, 50.0);
        env.step(-80.0).unwrap();
        assert_eq!(env.state().lambda, 0.0);
    }

    #[test]
    fn budget_exhaustion_ends_episode_within_budget() {
        let cfg = EnvConfig { budget: 50.0, ..small_config() };
        let mut env = AuctionEnv::reset(&cfg.profile(), &cfg, 9).unwrap();
        let out = env.step(500.0).unwrap();
        assert!(out.done);
        assert!(env.state().budget_spent <= 50.0);
        assert!(matches!(env.step(1.0), Err(Error::OutOfEpisode { .. })));
    }

    #[test]
    fn episode_runs_full_period() {
        let cfg = EnvConfig { budget: 1e9, ..small_config() };
        let mut env = AuctionEnv::reset(&cfg.profile(), &cfg, 2).unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(80.0).unwrap().done {
                break;
            }
        }
        assert_eq!(steps, 48);
        assert!(env.generate_impressions().is_err());
        let s = env.observe();
        assert_eq!(s.time_left(), 0.0);
    }

    #[test]
    fn raising_coefficient_never_loses_wins_in_a_step() {
        let cfg = EnvConfig { budget: 1e12, ..small_config() };
        for lambda in [20.0, 60.0, 100.0, 140.0] {
            let mut lo = AuctionEnv::reset(&cfg.profile(), &cfg, 4).unwrap();
            let mut hi = lo.clone();
            let imps = lo.state().current.clone();
            lo.step(lambda).unwrap();
            hi.step(lambda * 1.3).unwrap();
            for imp in &imps {
                let p = imp.max_competitor_bid();
                let won_lo = lambda * imp.value > p;
                let won_hi = lambda * 1.3 * imp.value > p;
                assert!(!won_lo || won_hi);
            }
            assert!(hi.state().wins >= lo.state().wins);
        }
    }
}
