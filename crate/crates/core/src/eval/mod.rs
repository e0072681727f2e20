//! Value, ER and Score metrics, paired experiments and search ablations.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math;
use crate::policy::{DtPolicy, PolicyAgent};
use crate::search::{GasRefiner, QEnsemble, SearchConfig};
use crate::sim::{run_episode, BiddingAgent, EnvConfig, EnvState, EpisodeLog, ScriptedAgent, ScriptedPolicy};

/// Totals of one finished period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub value: f64,
    /// `x_j = sum c_ij o_i / sum p_ij o_i`, `None` when nothing was won.
    pub constraint_ratios: Vec<Option<f64>>,
    pub budget_spent: f64,
    pub wins: u64,
}

impl EpisodeResult {
    pub fn from_state(s: &EnvState) -> Self {
        let constraint_ratios = s
            .constraint_cost_sums
            .iter()
            .zip(&s.constraint_perf_sums)
            .map(|(c, p)| if *p > 0.0 { Some(c / p) } else { None })
            .collect();
        EpisodeResult { value: s.value_won, constraint_ratios, budget_spent: s.budget_spent, wins: s.wins }
    }

    pub fn from_log(log: &EpisodeLog) -> Self {
        Self::from_state(&log.final_state)
    }
}

pub fn metric_value(ep: &EpisodeResult) -> f64 {
    ep.value
}

/// Whether each constraint was exceeded; undefined ratios are not.
pub fn er_flags(ep: &EpisodeResult, constraints: &[f64]) -> Vec<bool> {
    ep.constraint_ratios.iter().zip(constraints).map(|(x, c)| matches!(x, Some(x) if x > c)).collect()
}

/// Mean number of exceeded constraints per period.
pub fn metric_er(results: &[EpisodeResult], constraints: &[f64]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let exceeded: usize = results.iter().map(|r| er_flags(r, constraints).iter().filter(|f| **f).count()).sum();
    exceeded as f64 / results.len() as f64
}

/// `min{(C_j / x_j)^beta, 1}`; 1 when `x_j` is undefined.
pub fn penalty(ratio: Option<f64>, bound: f64, beta: f64) -> f64 {
    match ratio {
        Some(x) if x > bound => math::powf(bound / x, beta).min(1.0),
        _ => 1.0,
    }
}

/// Value times the worst constraint penalty.
pub fn metric_score(ep: &EpisodeResult, constraints: &[f64], beta: f64) -> f64 {
    let worst = ep.constraint_ratios.iter().zip(constraints).map(|(x, c)| penalty(*x, *c, beta)).fold(1.0, f64::min);
    ep.value * worst
}

/// One row of the per-episode report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub agent: String,
    pub budget_frac: f64,
    /// Environment seed of the episode, shared by all agents in the cell.
    pub seed: u64,
    pub period: usize,
    pub value: f64,
    pub score: f64,
    pub er_flags: Vec<bool>,
    pub constraint_ratios: Vec<Option<f64>>,
    /// Set when the agent errored; metrics are then zero.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub agent: String,
    pub budget_frac: f64,
    pub n: usize,
    pub failed: usize,
    pub mean_value: f64,
    pub mean_score: f64,
    pub er: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EpisodeRow>,
    pub constraints: Vec<f64>,
    pub beta: f64,
    pub reference_budget: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Value,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation of the differences.
    pub std: f64,
    /// `mean / (std / sqrt(n))`; infinite when every difference is equal and non-zero.
    pub t: f64,
}

impl MetricReport {
    pub fn agents(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.agent) {
                out.push(r.agent.clone());
            }
        }
        out
    }

    /// One row per `(agent, budget)` in first-seen order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(String, u64)> = Vec::new();
        for r in &self.rows {
            let k = (r.agent.clone(), r.budget_frac.to_bits());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(agent, bits)| {
                let rows: Vec<&EpisodeRow> =
                    self.rows.iter().filter(|r| r.agent == agent && r.budget_frac.to_bits() == bits).collect();
                let ok: Vec<&&EpisodeRow> = rows.iter().filter(|r| !r.failed).collect();
                let n = ok.len().max(1) as f64;
                let exceeded: usize = ok.iter().map(|r| r.er_flags.iter().filter(|f| **f).count()).sum();
                AggregateRow {
                    agent,
                    budget_frac: f64::from_bits(bits),
                    n: ok.len(),
                    failed: rows.len() - ok.len(),
                    mean_value: ok.iter().map(|r| r.value).sum::<f64>() / n,
                    mean_score: ok.iter().map(|r| r.score).sum::<f64>() / n,
                    er: exceeded as f64 / n,
                }
            })
            .collect()
    }

    /// Differences `a - b` over cells both agents completed.
    pub fn paired_differences(&self, a: &str, b: &str, metric: Metric) -> Vec<f64> {
        let pick = |r: &EpisodeRow| match metric {
            Metric::Value => r.value,
            Metric::Score => r.score,
        };
        let mut out = Vec::new();
        for ra in self.rows.iter().filter(|r| r.agent == a && !r.failed) {
            if let Some(rb) = self.rows.iter().find(|r| {
                r.agent == b && !r.failed && r.budget_frac.to_bits() == ra.budget_frac.to_bits() && r.period == ra.period && r.seed == ra.seed
            }) {
                out.push(pick(ra) - pick(rb));
            }
        }
        out
    }

    pub fn paired(&self, a: &str, b: &str, metric: Metric) -> PairedStats {
        paired_stats(&self.paired_differences(a, b, metric))
    }
}

pub fn paired_stats(d: &[f64]) -> PairedStats {
    let n = d.len();
    let mean = math::mean(d);
    let std = if n > 1 { math::sqrt(math::variance(d) * n as f64 / (n - 1) as f64) } else { 0.0 };
    let t = if std > 0.0 {
        mean / (std / math::sqrt(n as f64))
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY * mean.signum()
    };
    PairedStats { n, mean, std, t }
}

/// A bidding strategy under a report name.
pub struct NamedAgent<'a> {
    pub name: String,
    pub agent: Box<dyn BiddingAgent + 'a>,
}

impl<'a> NamedAgent<'a> {
    pub fn new(name: impl Into<String>, agent: impl BiddingAgent + 'a) -> Self {
        NamedAgent { name: name.into(), agent: Box::new(agent) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub budget_fracs: Vec<f64>,
    /// Budget that `budget_frac = 1` stands for.
    pub reference_budget: f64,
    pub n_periods: usize,
    pub seed: u64,
    pub beta: f64,
}

/// Environment seed of a `(budget, period)` cell, shared by every agent.
pub fn cell_seed(seed: u64, budget_idx: usize, period: usize) -> u64 {
    math::mix_seed(seed, ((budget_idx as u64) << 32) | period as u64)
}

fn fingerprint(config: &EnvConfig, spec: &ExperimentSpec) -> String {
    let text = alloc::format!("{config:?}|{spec:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    alloc::format!("{h:016x}")
}

/// Every agent plays every `(budget, period)` cell on the same impression stream.
pub fn run_experiment(agents: &mut [NamedAgent<'_>], config: &EnvConfig, spec: &ExperimentSpec) -> Result<MetricReport> {
    config.validate()?;
    contract!(spec.reference_budget > 0.0, "reference budget must be positive");
    contract!(spec.budget_fracs.iter().all(|f| *f > 0.0), "budget fractions must be positive");
    let constraints = config.profile().bounds();
    let mut rows = Vec::with_capacity(agents.len() * spec.budget_fracs.len() * spec.n_periods);
    for named in agents.iter_mut() {
        for (b, frac) in spec.budget_fracs.iter().enumerate() {
            let profile = config.profile().with_budget(spec.reference_budget * frac);
            named.agent.set_budget(profile.budget);
            for period in 0..spec.n_periods {
                let env_seed = cell_seed(spec.seed, b, period);
                let agent_seed = math::mix_seed(env_seed, 0xA6E7);
                let row = match run_episode(named.agent.as_mut(), &profile, config, env_seed, agent_seed) {
                    Ok(log) => {
                        let ep = EpisodeResult::from_log(&log);
                        EpisodeRow {
                            agent: named.name.clone(),
                            budget_frac: *frac,
                            seed: env_seed,
                            period,
                            value: metric_value(&ep),
                            score: metric_score(&ep, &constraints, spec.beta),
                            er_flags: er_flags(&ep, &constraints),
                            constraint_ratios: ep.constraint_ratios,
                            failed: false,
                        }
                    }
                    Err(_) => EpisodeRow {
                        agent: named.name.clone(),
                        budget_frac: *frac,
                        seed: env_seed,
                        period,
                        value: 0.0,
                        score: 0.0,
                        er_flags: alloc::vec![false; constraints.len()],
                        constraint_ratios: alloc::vec![None; constraints.len()],
                        failed: true,
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(MetricReport { rows, constraints, beta: spec.beta, reference_budget: spec.reference_budget, fingerprint: fingerprint(config, spec) })
}

/// Largest budget the oracle-pacing agent still spends at least `share`
/// of, averaged over `n_periods`, found by bisection in log space.
pub fn calibrate_reference_budget(config: &EnvConfig, n_periods: usize, share: f64, seed: u64) -> Result<f64> {
    config.validate()?;
    let spend_share = |budget: f64| -> Result<f64> {
        let profile = config.profile().with_budget(budget);
        let mut cfg = config.clone();
        cfg.budget = budget;
        let mut fracs = Vec::with_capacity(n_periods);
        for p in 0..n_periods {
            let env_seed = cell_seed(seed, 0, p);
            let mut agent = ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&cfg), &cfg, budget, env_seed);
            let log = run_episode(&mut agent, &profile, &cfg, env_seed, env_seed)?;
            fracs.push(log.final_state.budget_spent / budget);
        }
        Ok(math::mean(&fracs))
    };
    let (mut lo, mut hi) = (config.budget / 64.0, config.budget * 16.0);
    if spend_share(hi)? >= share {
        return Ok(hi);
    }
    if spend_share(lo)? < share {
        return Ok(lo);
    }
    for _ in 0..16 {
        let mid = math::sqrt(lo * hi);
        if spend_share(mid)? >= share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationKind {
    SearchBudget,
    NCritics,
    SearchRange,
}

impl AblationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationKind::SearchBudget => "search_budget",
            AblationKind::NCritics => "n_critics",
            AblationKind::SearchRange => "search_range",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "search_budget" => Some(AblationKind::SearchBudget),
            "n_critics" => Some(AblationKind::NCritics),
            "search_range" => Some(AblationKind::SearchRange),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub param: f64,
    pub mean_value: f64,
    pub mean_score: f64,
    pub er: f64,
}

pub struct AblationSetup<'a> {
    pub policy: &'a DtPolicy,
    pub ensemble: &'a dyn QEnsemble,
    pub search: SearchConfig,
    pub config: EnvConfig,
    pub spec: ExperimentSpec,
}

/// The search config of one ablation point.
pub fn ablation_config(kind: AblationKind, base: &SearchConfig, value: f64) -> SearchConfig {
    match kind {
        AblationKind::SearchBudget => SearchConfig { n_proposals: value as usize, ..*base },
        AblationKind::NCritics => SearchConfig { m_critics: value as usize, ..*base },
        AblationKind::SearchRange => base.with_range(value),
    }
}

/// Sweep one search setting with everything else fixed.
pub fn ablation_suite(kind: AblationKind, grid: &[f64], setup: &AblationSetup<'_>) -> Result<(Vec<AblationRow>, MetricReport)> {
    let mut agents = Vec::with_capacity(grid.len());
    for value in grid {
        let cfg = ablation_config(kind, &setup.search, *value);
        cfg.validate()?;
        let agent = PolicyAgent::with_refiner(setup.policy, GasRefiner::new(setup.ensemble, cfg, setup.policy.action_bounds));
        agents.push(NamedAgent::new(alloc::format!("{}={value}", kind.as_str()), agent));
    }
    let report = run_experiment(&mut agents, &setup.config, &setup.spec)?;
    let rows = grid
        .iter()
        .zip(report.agents())
        .map(|(value, name)| {
            let agg: Vec<AggregateRow> = report.aggregate().into_iter().filter(|a| a.agent == name).collect();
            let k = agg.len().max(1) as f64;
            AblationRow {
                kind,
                param: *value,
                mean_value: agg.iter().map(|a| a.mean_value).sum::<f64>() / k,
                mean_score: agg.iter().map(|a| a.mean_score).sum::<f64>() / k,
                er: agg.iter().map(|a| a.er).sum::<f64>() / k,
            }
        })
        .collect();
    Ok((rows, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ep(value: f64, ratios: Vec<Option<f64>>) -> EpisodeResult {
        EpisodeResult { value, constraint_ratios: ratios, budget_spent: 0.0, wins: 0 }
    }

    #[test]
    fn value_examples() {
        assert_eq!(metric_value(&ep(0.0, vec![None])), 0.0);
        assert_eq!(metric_value(&ep(0.2 + 0.3, vec![None])), 0.5);
    }

    #[test]
    fn score_examples() {
        assert!((metric_score(&ep(100.0, vec![Some(125.0)]), &[100.0], 2.0) - 64.0).abs() < 1e-9);
        assert_eq!(metric_score(&ep(100.0, vec![Some(80.0)]), &[100.0], 2.0), 100.0);
        assert_eq!(metric_score(&ep(100.0, vec![None]), &[100.0], 2.0), 100.0);
    }

    #[test]
    fn er_examples() {
        let rs = vec![ep(1.0, vec![Some(2.0)]), ep(1.0, vec![Some(0.5)]), ep(1.0, vec![Some(3.0)]), ep(1.0, vec![None])];
        assert_eq!(metric_er(&rs, &[1.0]), 0.5);
        assert_eq!(metric_er(&rs[1..2], &[1.0]), 0.0);
    }

    #[test]
    fn random_fixtures_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let j = rng.gen_range(1..4);
            let bounds: Vec<f64> = (0..j).map(|_| rng.gen_range(1.0..10.0)).collect();
            let results: Vec<EpisodeResult> = (0..rng.gen_range(1..8))
                .map(|_| {
                    let ratios = (0..j).map(|_| if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0.0..20.0)) }).collect();
                    ep(rng.gen_range(0.0..100.0), ratios)
                })
                .collect();
            let mut count = 0usize;
            for r in &results {
                let mut worst: f64 = 1.0;
                for (x, c) in r.constraint_ratios.iter().zip(&bounds) {
                    if let Some(x) = x {
                        if x > c {
                            count += 1;
                            worst = worst.min((c / x) * (c / x));
                        }
                    }
                }
                let s = metric_score(r, &bounds, 2.0);
                assert!((s - r.value * worst).abs() < 1e-9);
                assert!(s <= r.value);
            }
            assert_eq!(metric_er(&results, &bounds), count as f64 / results.len() as f64);
        }
    }

    #[test]
    fn paired_stats_of_constant_differences() {
        let s = paired_stats(&[0.0, 0.0, 0.0]);
        assert_eq!((s.mean, s.t), (0.0, 0.0));
        let s = paired_stats(&[1.0, 2.0, 3.0]);
        assert!((s.mean - 2.0).abs() < 1e-12 && (s.std - 1.0).abs() < 1e-12);
        assert!((s.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    fn small_config() -> EnvConfig {
        EnvConfig { impressions_per_step: 200, period_length: 12, budget: 3_000.0, ..EnvConfig::default() }
    }

    #[test]
    fn identical_agents_have_zero_paired_difference() {
        let cfg = small_config();
        let spec = ExperimentSpec { budget_fracs: vec![0.5, 1.0], reference_budget: cfg.budget, n_periods: 3, seed: 4, beta: 2.0 };
        let mut agents = vec![
            NamedAgent::new("a", ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&cfg), &cfg, cfg.budget, 1)),
            NamedAgent::new("b", ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&cfg), &cfg, cfg.budget, 1)),
        ];
        let report = run_experiment(&mut agents, &cfg, &spec).unwrap();
        assert_eq!(report.aggregate().len(), 4);
        let d = report.paired_differences("a", "b", Metric::Score);
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn oracle_pacing_dominates_zero_bid() {
        let cfg = small_config();
        let spec = ExperimentSpec { budget_fracs: vec![0.5, 1.0, 1.5], reference_budget: cfg.budget, n_periods: 3, seed: 5, beta: 2.0 };
        let mut agents = vec![
            NamedAgent::new("oracle", ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&cfg), &cfg, cfg.budget, 1)),
            NamedAgent::new("zero", ScriptedAgent::new(ScriptedPolicy::ZeroBid, &cfg, cfg.budget, 1)),
        ];
        let report = run_experiment(&mut agents, &cfg, &spec).unwrap();
        let d = report.paired_differences("oracle", "zero", Metric::Value);
        assert_eq!(d.len(), 9);
        assert!(d.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn value_matches_log_replay() {
        let cfg = small_config();
        let mut agent = ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&cfg), &cfg, cfg.budget, 2);
        let log = run_episode(&mut agent, &cfg.profile(), &cfg, 9, 9).unwrap();
        let replay: f64 = log.steps.iter().map(|s| s.reward.value).sum();
        assert!((replay - metric_value(&EpisodeResult::from_log(&log))).abs() < 1e-9);
    }
}
