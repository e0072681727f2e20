//! Perturbation proposals, Q-voting and search-refined actions.

mod voting;

pub use voting::{majority_probability, majority_winrate, qvote_ensemble, qvote_single, TieBreak, VoteTally};

use alloc::boxed::Box;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::CriticEnsemble;
use crate::data::{Dataset, Window};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::policy::{ActionRefiner, DtPolicy, RefinedPair, SequenceContext};

/// How the executed proposal is picked from the tally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    Argmax,
    /// Sample proportionally to `exp(total_votes / temperature)`.
    SoftmaxVotes { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_proposals: usize,
    pub perturb_low: f64,
    pub perturb_high: f64,
    pub m_critics: usize,
    pub tie_break: TieBreak,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_proposals: 5,
            perturb_low: 0.9,
            perturb_high: 1.1,
            m_critics: 3,
            tie_break: TieBreak::PreferBase,
            selection: Selection::Argmax,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Symmetric multiplicative range `[1 - range, 1 + range]`.
    pub fn with_range(mut self, range: f64) -> Self {
        self.perturb_low = 1.0 - range;
        self.perturb_high = 1.0 + range;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_proposals == 0 || self.m_critics == 0 {
            return Err(Error::Config("n_proposals and m_critics must be >= 1".into()));
        }
        if !(self.perturb_low > 0.0 && self.perturb_low <= 1.0 && self.perturb_high >= 1.0 && self.perturb_high.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "perturbation range [{}, {}] must satisfy 0 < low <= 1 <= high",
                self.perturb_low,
                self.perturb_high
            )));
        }
        if let Selection::SoftmaxVotes { temperature } = self.selection {
            if !(temperature > 0.0) {
                return Err(Error::Config("softmax temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `N - 1` perturbed copies followed by the base action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionProposalSet {
    pub base_action: f64,
    pub proposals: Vec<f64>,
    pub base_index: usize,
}

/// `a * eps` with `eps ~ U(low, high)` for each extra proposal, clamped to `bounds`.
pub fn propose_actions<R: Rng>(base_action: f64, cfg: &SearchConfig, bounds: (f64, f64), rng: &mut R) -> ActionProposalSet {
    let n = cfg.n_proposals.max(1);
    let mut proposals = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        let eps = rng.gen_range(cfg.perturb_low..=cfg.perturb_high);
        proposals.push((base_action * eps).clamp(bounds.0, bounds.1));
    }
    proposals.push(base_action);
    ActionProposalSet { base_action, proposals, base_index: n - 1 }
}

/// Anything that scores candidate actions with a set of critics.
pub trait QEnsemble {
    fn n_critics(&self) -> usize;
    /// Q of critic `k` for every candidate under the same context.
    fn q_values(&self, k: usize, ctx: &SequenceContext, candidates: &[f64]) -> Result<Vec<f64>>;
}

impl QEnsemble for CriticEnsemble {
    fn n_critics(&self) -> usize {
        self.len()
    }

    fn q_values(&self, k: usize, ctx: &SequenceContext, candidates: &[f64]) -> Result<Vec<f64>> {
        contract!(k < self.len(), "critic {k} of {}", self.len());
        ctx.validate()?;
        contract!(candidates.iter().all(|a| a.is_finite()), "candidate action is not finite");
        let inputs: Vec<_> = candidates.iter().map(|a| self.encoder.critic_context(ctx, *a, crate::critic::query_len(self.arch.context))).collect();
        let out = self.nets().q.forward_batch(&self.members[k].q, &inputs)?;
        let t = inputs.first().map_or(0, |i| i.len());
        Ok((0..candidates.len()).map(|b| out.get(b * t + t - 1, 0)).collect())
    }
}

/// Critics sharing `Q(a) = -(a - a*)^2` with `a*` chosen per context.
pub struct SyntheticQ {
    pub n: usize,
    pub target: Box<dyn Fn(&SequenceContext) -> f64>,
}

impl SyntheticQ {
    pub fn new(n: usize, target: impl Fn(&SequenceContext) -> f64 + 'static) -> Self {
        SyntheticQ { n, target: Box::new(target) }
    }

    pub fn value(&self, ctx: &SequenceContext, a: f64) -> f64 {
        let d = a - (self.target)(ctx);
        -d * d
    }
}

impl QEnsemble for SyntheticQ {
    fn n_critics(&self) -> usize {
        self.n
    }

    fn q_values(&self, _k: usize, ctx: &SequenceContext, candidates: &[f64]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|a| self.value(ctx, *a)).collect())
    }
}

/// The `M x N` Q matrix of the first `m` critics.
pub fn q_matrix(ens: &dyn QEnsemble, m: usize, ctx: &SequenceContext, proposals: &[f64]) -> Result<Vec<Vec<f64>>> {
    contract!(m <= ens.n_critics(), "asked for {m} critics, ensemble has {}", ens.n_critics());
    (0..m).map(|k| ens.q_values(k, ctx, proposals)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub action: f64,
    pub proposals: ActionProposalSet,
    pub tally: VoteTally,
}

fn select<R: Rng>(tally: &VoteTally, cfg: &SearchConfig, rng: &mut R) -> usize {
    match cfg.selection {
        Selection::Argmax => tally.selected_index,
        Selection::SoftmaxVotes { temperature } => {
            let max = tally.total_votes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = tally.total_votes.iter().map(|v| math::exp((v - max) / temperature)).collect();
            let z: f64 = w.iter().sum();
            let mut u = rng.gen_range(0.0..z);
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i;
                }
                u -= wi;
            }
            w.len() - 1
        }
    }
}

/// Vote among perturbations of `base` under `ctx`.
pub fn search_action<R: Rng>(
    base: f64,
    ens: &dyn QEnsemble,
    ctx: &SequenceContext,
    cfg: &SearchConfig,
    bounds: (f64, f64),
    rng: &mut R,
) -> Result<SearchOutcome> {
    let proposals = propose_actions(base, cfg, bounds, rng);
    let q = q_matrix(ens, cfg.m_critics, ctx, &proposals.proposals)?;
    let tally = qvote_ensemble(&q, cfg.tie_break, proposals.base_index)?;
    let idx = select(&tally, cfg, rng);
    Ok(SearchOutcome { action: proposals.proposals[idx], proposals, tally })
}

/// Policy action, perturbed, voted on and replaced by the winner.
pub fn gas_infer_step<R: Rng>(
    policy: &DtPolicy,
    ens: &dyn QEnsemble,
    ctx: &SequenceContext,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let base = policy.act(ctx)?;
    search_action(base, ens, ctx, cfg, policy.action_bounds, rng)
}

/// [`ActionRefiner`] running the search at every step.
pub struct GasRefiner<'a> {
    pub ensemble: &'a dyn QEnsemble,
    pub cfg: SearchConfig,
    pub bounds: (f64, f64),
    rng: ChaCha8Rng,
}

impl<'a> GasRefiner<'a> {
    pub fn new(ensemble: &'a dyn QEnsemble, cfg: SearchConfig, bounds: (f64, f64)) -> Self {
        GasRefiner { ensemble, cfg, bounds, rng: ChaCha8Rng::seed_from_u64(cfg.seed) }
    }
}

impl ActionRefiner for GasRefiner<'_> {
    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(math::mix_seed(self.cfg.seed, episode_seed));
    }

    fn refine(&mut self, ctx: &SequenceContext, base: f64) -> Result<f64> {
        if self.cfg.n_proposals <= 1 {
            return Ok(base);
        }
        Ok(search_action(base, self.ensemble, ctx, &self.cfg, self.bounds, &mut self.rng)?.action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Emit a pair only when the winner strictly out-votes the logged action.
    pub strict_improvement: bool,
    pub context_len: usize,
    pub rtg_scale: f64,
}

/// Search around every logged action using the logged history as context.
///
/// `ds` must carry the rewards the policy conditions on, so the pair
/// contexts hold the same returns-to-go as during behavior cloning.
pub fn gas_sft_refine(
    ds: &Dataset,
    ens: &dyn QEnsemble,
    cfg: &SearchConfig,
    refine: &RefineConfig,
    bounds: (f64, f64),
) -> Result<Vec<RefinedPair>> {
    cfg.validate()?;
    contract!(refine.context_len >= 1, "context_len must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    for (i, traj) in ds.trajectories.iter().enumerate() {
        for (t, tr) in traj.transitions.iter().enumerate() {
            let w = Window::from_trajectory(ds, i, t, refine.context_len);
            let ctx = SequenceContext::from_window(&w, refine.context_len - 1, refine.rtg_scale);
            let out = search_action(tr.action, ens, &ctx, cfg, bounds, &mut rng)?;
            let winner = out.tally.selected_index;
            let improved = out.tally.total_votes[winner] > out.tally.total_votes[out.proposals.base_index];
            if improved || !refine.strict_improvement {
                pairs.push(RefinedPair { context: ctx, refined_action: out.action });
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::StateVector;

    fn ctx() -> SequenceContext {
        let mut c = SequenceContext::new(4);
        c.push_state(StateVector::default(), 0.0, 0);
        c
    }

    #[test]
    fn proposals_stay_in_range_and_keep_base_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = propose_actions(10.0, &SearchConfig::default(), (0.0, 1e9), &mut rng);
            assert_eq!(p.proposals.len(), 5);
            assert_eq!(p.proposals[p.base_index], 10.0);
            assert!(p.proposals.iter().all(|a| (9.0..=11.0).contains(a)));
        }
    }

    #[test]
    fn zero_base_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = propose_actions(0.0, &SearchConfig::default(), (-5.0, 5.0), &mut rng);
        assert!(p.proposals.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn proposals_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = propose_actions(100.0, &SearchConfig::default(), (0.0, 100.0), &mut rng);
        assert!(p.proposals.iter().all(|a| *a <= 100.0));
    }

    #[test]
    fn epsilon_law_moments() {
        let cfg = SearchConfig { n_proposals: 2, ..SearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..100_000).map(|_| propose_actions(1.0, &cfg, (0.0, 2.0), &mut rng).proposals[0]).collect();
        let mean = math::mean(&draws);
        assert!((mean - 1.0).abs() < 1e-3, "{mean}");
        assert!(draws.iter().all(|e| (0.9..=1.1).contains(e)));
    }

    #[test]
    fn single_proposal_returns_base() {
        let oracle = SyntheticQ::new(3, |_| 50.0);
        let cfg = SearchConfig { n_proposals: 1, ..SearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = search_action(42.0, &oracle, &ctx(), &cfg, (0.0, 100.0), &mut rng).unwrap();
        assert_eq!(out.action, 42.0);
    }

    #[test]
    fn synthetic_oracle_picks_nearest_proposal() {
        let oracle = SyntheticQ::new(3, |_| 10.4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let out = search_action(10.0, &oracle, &ctx(), &SearchConfig::default(), (0.0, 100.0), &mut rng).unwrap();
            let best = out.proposals.proposals.iter().copied().min_by(|a, b| (a - 10.4).abs().total_cmp(&(b - 10.4).abs())).unwrap();
            assert_eq!(out.action, best);
        }
    }

    #[test]
    fn search_is_deterministic_per_seed() {
        let oracle = SyntheticQ::new(3, |_| 10.4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            search_action(10.0, &oracle, &ctx(), &SearchConfig::default(), (0.0, 100.0), &mut rng).unwrap().action
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn too_many_critics_is_an_error() {
        let oracle = SyntheticQ::new(1, |_| 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(search_action(1.0, &oracle, &ctx(), &SearchConfig::default(), (0.0, 2.0), &mut rng).is_err());
    }

    #[test]
    fn softmax_selection_favours_high_votes() {
        let oracle = SyntheticQ::new(3, |_| 11.0);
        let cfg = SearchConfig { selection: Selection::SoftmaxVotes { temperature: 0.05 }, ..SearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = 0;
        for _ in 0..200 {
            let out = search_action(10.0, &oracle, &ctx(), &cfg, (0.0, 100.0), &mut rng).unwrap();
            if out.action == out.proposals.proposals[out.tally.selected_index] {
                hits += 1;
            }
        }
        assert!(hits > 180, "{hits}");
    }
}
