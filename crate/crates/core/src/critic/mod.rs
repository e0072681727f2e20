//! Preference rewards and history-conditioned Q ensembles trained with IQL.

mod preference;

pub use preference::{constraint_penalty, mean_penalty, preference_reward, PreferenceKind, PreferenceSpec};


use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::approx::{clip_grad_norm, soft_update, AdamWConfig, AttentionScope, LrSchedule, Matrix, OptimizerState, ParameterSet, SeqNet, Tape};
use crate::data::{Batch, BatchSampler, Dataset, Window};
use crate::encode::{ArchConfig, Encoder};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::policy::SequenceContext;

/// `|tau - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

fn expectile_grad(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    2.0 * w * u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlConfig {
    pub gamma: f64,
    pub tau_soft: f64,
    pub expectile: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub seq_len: usize,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    /// Divides rewards before regression; `None` uses the mean episode return.
    pub reward_scale: Option<f64>,
    /// `Causal` conditions V on history like Q; `SelfOnly` gives a plain V(s).
    pub v_scope: AttentionScope,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            gamma: 0.99,
            tau_soft: 0.01,
            expectile: 0.7,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch: 128,
            steps: 40_000,
            seq_len: 20,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            reward_scale: None,
            v_scope: AttentionScope::Causal,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::Config(alloc::format!("expectile {} outside (0,1)", self.expectile)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(alloc::format!("gamma {} outside (0,1]", self.gamma)));
        }
        if !(self.tau_soft > 0.0 && self.tau_soft <= 1.0) {
            return Err(Error::Config(alloc::format!("tau_soft {} outside (0,1]", self.tau_soft)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("lr and batch must be positive".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(alloc::format!("seq_len must be >= 2 to form Bellman targets, got {}", self.seq_len)));
        }
        if let Some(s) = self.reward_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(alloc::format!("reward_scale {s} must be positive")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Q, target Q and V parameters of one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticMember {
    pub seed: u64,
    pub q: ParameterSet,
    pub q_target: ParameterSet,
    pub v: ParameterSet,
}

/// The two network layouts shared by all members.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNets {
    pub q: SeqNet,
    pub v: SeqNet,
}

impl CriticNets {
    pub fn new(arch: &ArchConfig, v_scope: AttentionScope) -> Result<Self> {
        let q = SeqNet::init(arch.critic_spec("action", AttentionScope::Causal), 0)?.0;
        let v = SeqNet::init(arch.critic_spec("state", v_scope), 0)?.0;
        Ok(CriticNets { q, v })
    }

    pub fn init_member(&self, seed: u64) -> Result<CriticMember> {
        let (_, q) = SeqNet::init(self.q.spec.clone(), math::mix_seed(seed, 1))?;
        let (_, v) = SeqNet::init(self.v.spec.clone(), math::mix_seed(seed, 2))?;
        Ok(CriticMember { seed, q_target: q.clone(), q, v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlLosses {
    pub loss_v: f64,
    pub loss_q: f64,
}

/// Optimizer state for one member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberOptim {
    pub q: OptimizerState,
    pub v: OptimizerState,
}

impl MemberOptim {
    pub fn new(member: &CriticMember, cfg: &IqlConfig) -> Self {
        MemberOptim { q: OptimizerState::new(cfg.adam(), member.q.len()), v: OptimizerState::new(cfg.adam(), member.v.len()) }
    }
}

/// One-step regression targets `r + gamma * V(s')` for every window
/// position, scaled by `1 / reward_scale`.
///
/// Terminal positions get `r` alone; padding and the last position of a
/// window whose successor is outside it get `None`.
pub fn bellman_targets(w: &Window, v_next: &[f64], gamma: f64, reward_scale: f64) -> Vec<Option<f64>> {
    (0..w.len())
        .map(|k| {
            if w.mask[k] == 0.0 {
                None
            } else if w.dones[k] {
                Some(w.rewards[k] / reward_scale)
            } else if k + 1 < w.len() {
                Some(w.rewards[k] / reward_scale + gamma * v_next[k + 1])
            } else {
                None
            }
        })
        .collect()
}

fn column_values(m: &Matrix) -> Vec<f64> {
    (0..m.rows).map(|i| m.get(i, 0)).collect()
}

/// One IQL step on `batch`: expectile regression of V towards the target
/// Q, Bellman regression of Q towards `r + gamma V(s')` using the V of
/// before this step, then a soft update of the target Q.
pub fn iql_update(
    nets: &CriticNets,
    encoder: &Encoder,
    member: &mut CriticMember,
    opt: &mut MemberOptim,
    batch: &Batch,
    cfg: &IqlConfig,
    reward_scale: f64,
) -> Result<IqlLosses> {
    contract!(!batch.windows.is_empty(), "empty batch");
    let mut gv = member.v.zeros_like();
    let mut gq = member.q.zeros_like();
    let (mut sum_v, mut n_v, mut sum_q, mut n_q) = (0.0, 0usize, 0.0, 0usize);
    for w in &batch.windows {
        contract!(w.rewards.len() == w.len(), "window without rewards");
    }
    let inputs: Vec<_> = batch.windows.iter().map(|w| encoder.critic_window(w)).collect();
    let q_hat = column_values(&nets.q.forward_batch(&member.q_target, &inputs)?);

    let mut tape = Tape::new();
    let v_out = nets.v.build_batch(&mut tape, &member.v, &inputs)?;
    let v_vals = column_values(tape.value(v_out));
    let mut seed = Matrix::zeros(v_vals.len(), 1);
    let mut row = 0;
    for w in &batch.windows {
        for k in 0..w.len() {
            if w.mask[k] > 0.0 {
                let u = q_hat[row + k] - v_vals[row + k];
                sum_v += expectile_loss(u, cfg.expectile);
                seed.data[row + k] = -expectile_grad(u, cfg.expectile);
                n_v += 1;
            }
        }
        row += w.len();
    }
    tape.backward_from(v_out, seed, &mut gv)?;

    let mut tape = Tape::new();
    let q_out = nets.q.build_batch(&mut tape, &member.q, &inputs)?;
    let q_vals = column_values(tape.value(q_out));
    let mut seed = Matrix::zeros(q_vals.len(), 1);
    let mut row = 0;
    for w in &batch.windows {
        let targets = bellman_targets(w, &v_vals[row..row + w.len()], cfg.gamma, reward_scale);
        for (k, y) in targets.iter().enumerate() {
            if let Some(y) = y {
                let d = q_vals[row + k] - y;
                sum_q += d * d;
                seed.data[row + k] = 2.0 * d;
                n_q += 1;
            }
        }
        row += w.len();
    }
    tape.backward_from(q_out, seed, &mut gq)?;
    let loss_v = sum_v / n_v.max(1) as f64;
    let loss_q = sum_q / n_q.max(1) as f64;
    if !loss_v.is_finite() || !loss_q.is_finite() {
        return Err(Error::Training(alloc::format!("non-finite IQL loss (V {loss_v}, Q {loss_q})")));
    }
    for g in gv.iter_mut() {
        *g /= n_v.max(1) as f64;
    }
    for g in gq.iter_mut() {
        *g /= n_q.max(1) as f64;
    }
    clip_grad_norm(&mut gv, cfg.grad_clip);
    clip_grad_norm(&mut gq, cfg.grad_clip);
    opt.v.step(&mut member.v, &gv)?;
    opt.q.step(&mut member.q, &gq)?;
    soft_update(&mut member.q_target, &member.q, cfg.tau_soft)?;
    Ok(IqlLosses { loss_v, loss_q })
}

/// Timesteps a Q query may span. The last position of a training window only
/// bootstraps the one before it and never gets a Q target of its own.
pub fn query_len(context: usize) -> usize {
    context.saturating_sub(1).max(1)
}

/// `Q(s_t, candidate | s_<t, a_<t)` from the online Q net.
pub fn qt_forward(nets: &CriticNets, encoder: &Encoder, member: &CriticMember, ctx: &SequenceContext, candidate: f64) -> Result<f64> {
    ctx.validate()?;
    contract!(candidate.is_finite(), "candidate action is not finite");
    let out = nets.q.forward(&member.q, &encoder.critic_context(ctx, candidate, query_len(nets.q.spec.context_tokens)))?;
    Ok(out.get(out.rows - 1, 0))
}

/// Mean episode return of the applied rewards, floored away from zero.
pub fn auto_reward_scale(ds: &Dataset) -> f64 {
    let returns: Vec<f64> = ds.trajectories.iter().map(|t| math::abs(t.episode_return())).collect();
    let m = math::mean(&returns);
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

/// Mean per-step won value, the default weight of the weighted-sum preference.
pub fn default_weight(ds: &Dataset) -> f64 {
    let v: Vec<f64> = ds.transitions().map(|t| t.reward.value).collect();
    math::mean(&v)
}

/// M critics for one preference, plus everything needed to query them.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    pub preference: PreferenceSpec,
    pub arch: ArchConfig,
    pub v_scope: AttentionScope,
    pub encoder: Encoder,
    pub reward_scale: f64,
    pub members: Vec<CriticMember>,
    nets: CriticNets,
}

impl CriticEnsemble {
    pub fn new(
        preference: PreferenceSpec,
        arch: ArchConfig,
        v_scope: AttentionScope,
        encoder: Encoder,
        reward_scale: f64,
        members: Vec<CriticMember>,
    ) -> Result<Self> {
        let nets = CriticNets::new(&arch, v_scope)?;
        let probe = nets.init_member(0)?;
        for m in &members {
            contract!(
                m.q.same_layout(&probe.q) && m.q_target.same_layout(&probe.q) && m.v.same_layout(&probe.v),
                "member {} does not match the ensemble architecture",
                m.seed
            );
        }
        Ok(CriticEnsemble { preference, arch, v_scope, encoder, reward_scale, members, nets })
    }

    pub fn nets(&self) -> &CriticNets {
        &self.nets
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The first `m` members.
    pub fn truncated(&self, m: usize) -> Self {
        let mut e = self.clone();
        e.members.truncate(m);
        e
    }

    /// The members at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut e = self.clone();
        e.members = Vec::with_capacity(indices.len());
        for &i in indices {
            contract!(i < self.members.len(), "member {i} out of range");
            e.members.push(self.members[i].clone());
        }
        Ok(e)
    }

    pub fn q(&self, member: usize, ctx: &SequenceContext, candidate: f64) -> Result<f64> {
        qt_forward(&self.nets, &self.encoder, &self.members[member], ctx, candidate)
    }

    pub fn mean_q(&self, ctx: &SequenceContext, candidate: f64) -> Result<f64> {
        contract!(!self.members.is_empty(), "empty ensemble");
        let mut s = 0.0;
        for m in 0..self.members.len() {
            s += self.q(m, ctx, candidate)?;
        }
        Ok(s / self.members.len() as f64)
    }
}

/// Per-member training curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub curves: Vec<Vec<IqlLosses>>,
}

/// Train one member on the shared data stream.
pub fn train_member(
    nets: &CriticNets,
    encoder: &Encoder,
    ds: &Dataset,
    cfg: &IqlConfig,
    reward_scale: f64,
    seed: u64,
    data_seed: u64,
) -> Result<(CriticMember, Vec<IqlLosses>)> {
    let mut member = nets.init_member(seed)?;
    let mut opt = MemberOptim::new(&member, cfg);
    let mut sampler = BatchSampler::new(ds, data_seed)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.lr * cfg.lr_schedule.factor(step, cfg.steps);
        opt.q.config.lr = lr;
        opt.v.config.lr = lr;
        let batch = sampler.sample(ds, cfg.batch, cfg.seq_len)?;
        curve.push(iql_update(nets, encoder, &mut member, &mut opt, &batch, cfg, reward_scale)?);
    }
    Ok((member, curve))
}

/// Apply the preference rewards and train `m` members with seeds
/// `seed, seed + 1, ...` over one shared batch stream.
pub fn train_critics(
    ds: &Dataset,
    preference: &PreferenceSpec,
    arch: &ArchConfig,
    cfg: &IqlConfig,
    m: usize,
    seed: u64,
) -> Result<(CriticEnsemble, TrainingLog)> {
    contract!(m >= 1, "need at least one critic");
    preference.validate()?;
    cfg.validate()?;
    contract!(cfg.seq_len <= arch.context, "seq_len {} exceeds context {}", cfg.seq_len, arch.context);
    let mut ds = ds.clone();
    let constraints = ds.constraints.clone();
    ds.apply_rewards(|c| preference_reward(preference, c, &constraints), cfg.gamma);
    let reward_scale = cfg.reward_scale.unwrap_or_else(|| auto_reward_scale(&ds));
    let encoder = Encoder::fit(&ds, 1.0);
    let nets = CriticNets::new(arch, cfg.v_scope)?;
    let data_seed = math::mix_seed(seed, 0xDA7A);
    let mut members = Vec::with_capacity(m);
    let mut log = TrainingLog::default();
    for k in 0..m as u64 {
        let (member, curve) = train_member(&nets, &encoder, &ds, cfg, reward_scale, seed + k, data_seed)?;
        members.push(member);
        log.curves.push(curve);
    }
    let ens = CriticEnsemble::new(*preference, *arch, cfg.v_scope, encoder, reward_scale, members)?;
    Ok((ens, log))
}

/// Mean Q over members for each candidate.
pub fn ensemble_q_row(ens: &CriticEnsemble, ctx: &SequenceContext, candidates: &[f64]) -> Result<Vec<f64>> {
    candidates.iter().map(|a| ens.mean_q(ctx, *a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::data::{Trajectory, Transition};
    use crate::sim::{RewardComponents, StateVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.7), 0.7 * 4.0);
        assert!((expectile_loss(-2.0, 0.7) - 1.2).abs() < 1e-12);
        assert_eq!(expectile_loss(0.0, 0.3), 0.0);
    }

    proptest! {
        #[test]
        fn expectile_identities(u in -1e3f64..1e3, tau in 0.001f64..0.999) {
            prop_assert!(expectile_loss(u, tau) >= 0.0);
            prop_assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
            let a = expectile_loss(u, tau);
            let b = expectile_loss(-u, 1.0 - tau);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn state(features: &[f64]) -> StateVector {
        let mut s = StateVector::default();
        s.0[..features.len()].copy_from_slice(features);
        s
    }

    fn episode(period: u64, steps: &[(StateVector, f64, f64)]) -> Trajectory {
        let n = steps.len();
        let transitions = steps
            .iter()
            .enumerate()
            .map(|(t, (s, a, _))| Transition {
                period_id: period,
                advertiser_id: 0,
                t,
                state: *s,
                action: *a,
                reward: RewardComponents::zeros(1),
                done: t + 1 == n,
            })
            .collect();
        let mut traj = Trajectory::new(transitions).unwrap();
        traj.set_rewards(steps.iter().map(|s| s.2).collect(), 1.0);
        traj
    }

    fn tiny_arch(context: usize) -> ArchConfig {
        ArchConfig { n_layers: 1, n_heads: 2, hidden: 16, context, max_timestep: 8 }
    }

    fn fast_cfg(gamma: f64, seq_len: usize, steps: usize) -> IqlConfig {
        IqlConfig { gamma, lr: 3e-3, weight_decay: 0.0, batch: 16, steps, seq_len, tau_soft: 0.05, reward_scale: Some(1.0), ..IqlConfig::default() }
    }

    #[test]
    fn terminal_targets_equal_reward() {
        let ds = Dataset { trajectories: vec![episode(0, &[(state(&[0.1]), 1.0, 3.5)])], constraints: vec![1.0], seed: 0 };
        let w = Window::from_trajectory(&ds, 0, 0, 3);
        let t = bellman_targets(&w, &[100.0, 100.0, 100.0], 0.99, 1.0);
        assert_eq!(t, vec![None, None, Some(3.5)]);
    }

    #[test]
    fn targets_are_reproducible_from_components() {
        let steps: Vec<_> = (0..4).map(|i| (state(&[i as f64]), 1.0, i as f64)).collect();
        let ds = Dataset { trajectories: vec![episode(0, &steps)], constraints: vec![1.0], seed: 0 };
        let w = Window::from_trajectory(&ds, 0, 2, 3);
        let v = [0.5, 0.25, 0.125];
        let t = bellman_targets(&w, &v, 0.9, 2.0);
        assert_eq!(t[0], Some(0.0 / 2.0 + 0.9 * 0.25));
        assert_eq!(t[1], Some(1.0 / 2.0 + 0.9 * 0.125));
        assert_eq!(t[2], None);
        assert_eq!(t, bellman_targets(&w, &v, 0.9, 2.0));
    }

    fn train(ds: &Dataset, arch: ArchConfig, cfg: IqlConfig, seed: u64) -> (CriticNets, Encoder, CriticMember, Vec<IqlLosses>) {
        let nets = CriticNets::new(&arch, cfg.v_scope).unwrap();
        let enc = Encoder::fit(ds, 1.0);
        let (m, curve) = train_member(&nets, &enc, ds, &cfg, 1.0, seed, seed + 100).unwrap();
        (nets, enc, m, curve)
    }

    fn ctx_of(ds: &Dataset, traj: usize, t: usize, ctx_len: usize) -> SequenceContext {
        let w = Window::from_trajectory(ds, traj, t, ctx_len);
        SequenceContext::from_window(&w, ctx_len - 1, 1.0)
    }

    #[test]
    fn zero_head_gives_zero_q() {
        let ds = Dataset { trajectories: vec![episode(0, &[(state(&[0.3]), 2.0, 1.0), (state(&[0.4]), 1.0, 1.0)])], constraints: vec![1.0], seed: 0 };
        let nets = CriticNets::new(&tiny_arch(4), AttentionScope::Causal).unwrap();
        let mut m = nets.init_member(3).unwrap();
        m.q.tensor_mut("head.weight").unwrap().fill(0.0);
        m.q.tensor_mut("head.bias").unwrap().fill(0.0);
        let enc = Encoder::fit(&ds, 1.0);
        let ctx = ctx_of(&ds, 0, 1, 2);
        for a in [-3.0, 0.0, 7.0] {
            assert_eq!(qt_forward(&nets, &enc, &m, &ctx, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_reward_without_discount_converges_to_one() {
        let trajectories = (0..8).map(|p| episode(p, &[(state(&[0.1]), 1.0, 1.0), (state(&[0.2]), 1.0, 1.0), (state(&[0.3]), 1.0, 1.0)])).collect();
        let ds = Dataset { trajectories, constraints: vec![1.0], seed: 0 };
        let (nets, enc, m, curve) = train(&ds, tiny_arch(3), fast_cfg(0.0, 3, 400), 5);
        assert!(curve.last().unwrap().loss_q < 1e-4);
        for t in 0..3 {
            let q = qt_forward(&nets, &enc, &m, &ctx_of(&ds, 0, t, 3), 1.0).unwrap();
            assert!((q - 1.0).abs() < 1e-2, "t={t}: {q}");
        }
    }

    #[test]
    fn one_step_bandit_recovers_reward() {
        let r = |a: f64| 1.0 - 4.0 * (a - 0.5) * (a - 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trajectories = (0..256)
            .map(|p| {
                let a: f64 = rng.gen();
                episode(p, &[(state(&[0.5]), a, r(a))])
            })
            .collect();
        let ds = Dataset { trajectories, constraints: vec![1.0], seed: 0 };
        let (nets, enc, m, _) = train(&ds, tiny_arch(1), fast_cfg(0.99, 1, 1500), 2);
        let ctx = ctx_of(&ds, 0, 0, 1);
        for i in 0..=10 {
            let a = i as f64 / 10.0;
            let q = qt_forward(&nets, &enc, &m, &ctx, a).unwrap();
            assert!((q - r(a)).abs() < 0.05, "a={a}: q={q} r={}", r(a));
        }
    }
}
