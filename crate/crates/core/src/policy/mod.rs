//! Return-conditioned sequence policy, behavior cloning and fine-tuning.

mod context;

pub use context::SequenceContext;

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{clip_grad_norm, AdamWConfig, LrSchedule, Matrix, OptimizerState, ParameterSet, SeqInput, SeqNet, Tape};
use crate::critic::{preference_reward, PreferenceSpec};
use crate::data::{Batch, BatchSampler, Dataset, Window};
use crate::encode::{ArchConfig, Encoder};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::sim::{BiddingAgent, RewardComponents, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub seq_len: usize,
    /// Discount of the returns-to-go the policy conditions on.
    pub gamma: f64,
    pub rtg_scale: f64,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    /// Quantile of logged initial returns used as the deployment target.
    pub rtg_quantile: f64,
    /// Held-out MSE is recorded every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 128,
            steps: 40_000,
            seq_len: 20,
            gamma: 0.99,
            rtg_scale: 2000.0,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            rtg_quantile: 0.9,
            eval_every: 500,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("lr, batch and seq_len must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(alloc::format!("gamma {} outside (0,1]", self.gamma)));
        }
        if !(self.rtg_scale > 0.0) {
            return Err(Error::Config("rtg_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rtg_quantile) {
            return Err(Error::Config("rtg_quantile outside [0,1]".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// A context and the action search preferred for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPair {
    pub context: SequenceContext,
    pub refined_action: f64,
}

/// DT-lite: `(R, s, a)` tokens, deterministic action read at the state token.
#[derive(Debug, Clone, PartialEq)]
pub struct DtPolicy {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub params: ParameterSet,
    pub preference: PreferenceSpec,
    pub constraints: Vec<f64>,
    pub gamma: f64,
    /// Unscaled initial return-to-go used at deployment.
    pub rtg_target: f64,
    pub action_bounds: (f64, f64),
    net: SeqNet,
}

#[allow(clippy::too_many_arguments)]
impl DtPolicy {
    pub fn new(
        arch: ArchConfig,
        encoder: Encoder,
        params: ParameterSet,
        preference: PreferenceSpec,
        constraints: Vec<f64>,
        gamma: f64,
        rtg_target: f64,
        action_bounds: (f64, f64),
    ) -> Result<Self> {
        let net = SeqNet::from_params(arch.policy_spec(), &params)?;
        contract!(action_bounds.0 <= action_bounds.1, "empty action bounds");
        Ok(DtPolicy { arch, encoder, params, preference, constraints, gamma, rtg_target, action_bounds, net })
    }

    pub fn net(&self) -> &SeqNet {
        &self.net
    }

    pub fn clip(&self, a: f64) -> f64 {
        a.clamp(self.action_bounds.0, self.action_bounds.1)
    }

    /// Deterministic, clipped action for the pending decision of `ctx`.
    pub fn act(&self, ctx: &SequenceContext) -> Result<f64> {
        ctx.validate()?;
        contract!(ctx.len() <= self.arch.context, "context of {} exceeds {}", ctx.len(), self.arch.context);
        let out = self.net.forward(&self.params, &self.encoder.policy_context(ctx))?;
        let a = out.get(out.rows - 1, 0) * self.encoder.action_scale;
        if !a.is_finite() {
            return Err(Error::Training("policy produced a non-finite action".into()));
        }
        Ok(self.clip(a))
    }

    /// Per-step reward the conditioning return is built from.
    pub fn reward(&self, c: &RewardComponents) -> f64 {
        preference_reward(&self.preference, c, &self.constraints)
    }
}

/// Free-function form of [`DtPolicy::act`].
pub fn policy_act(policy: &DtPolicy, ctx: &SequenceContext) -> Result<f64> {
    policy.act(ctx)
}

/// Training and held-out curves, in squared units of the scaled action.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyCurve {
    pub train: Vec<f64>,
    /// `(step, held-out MSE)`; includes step 0 and the final step.
    pub heldout: Vec<(usize, f64)>,
}

fn window_loss_grad(net: &SeqNet, params: &ParameterSet, encoder: &Encoder, batch: &Batch, grad: Option<&mut [f64]>) -> Result<f64> {
    let inputs: Vec<SeqInput> = batch.windows.iter().map(|w| encoder.policy_window(w)).collect();
    let mut tape = Tape::new();
    let out = net.build_batch(&mut tape, params, &inputs)?;
    let pred = tape.value(out);
    let mut seed = Matrix::zeros(pred.rows, 1);
    let (mut sum, mut n) = (0.0, 0usize);
    let mut row = 0;
    for w in &batch.windows {
        for k in 0..w.len() {
            if w.mask[k] > 0.0 {
                let d = pred.data[row + k] - w.actions[k] / encoder.action_scale;
                sum += d * d;
                seed.data[row + k] = 2.0 * d;
                n += 1;
            }
        }
        row += w.len();
    }
    let n = n.max(1) as f64;
    if let Some(grad) = grad {
        for x in seed.data.iter_mut() {
            *x /= n;
        }
        tape.backward_from(out, seed, grad)?;
    }
    Ok(sum / n)
}

/// Every window ending at a logged step of `ds`.
pub fn all_windows(ds: &Dataset, seq_len: usize) -> Vec<Window> {
    let mut out = Vec::with_capacity(ds.n_transitions());
    for (i, t) in ds.trajectories.iter().enumerate() {
        for end in 0..t.len() {
            out.push(Window::from_trajectory(ds, i, end, seq_len));
        }
    }
    out
}

/// Masked action MSE of `policy` over `windows` (scaled units).
pub fn heldout_mse(policy: &DtPolicy, windows: &[Window]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0.0;
    for chunk in windows.chunks(256) {
        let batch = Batch { windows: chunk.to_vec() };
        let real: f64 = chunk.iter().map(|w| w.n_real() as f64).sum();
        sum += window_loss_grad(&policy.net, &policy.params, &policy.encoder, &batch, None)? * real;
        n += real;
    }
    Ok(if n > 0.0 { sum / n } else { 0.0 })
}

/// Conditioned behavior cloning. Rewards of `preference` are applied to a
/// copy of `ds`; every tenth trajectory is held out for the curve.
pub fn train_policy_bc(
    ds: &Dataset,
    preference: &PreferenceSpec,
    arch: &ArchConfig,
    cfg: &PolicyTrainConfig,
    action_bounds: (f64, f64),
    seed: u64,
) -> Result<(DtPolicy, PolicyCurve)> {
    cfg.validate()?;
    preference.validate()?;
    contract!(ds.n_transitions() > 0, "dataset is empty");
    contract!(cfg.seq_len <= arch.context, "seq_len {} exceeds context {}", cfg.seq_len, arch.context);
    let mut ds = ds.clone();
    let constraints = ds.constraints.clone();
    ds.apply_rewards(|c| preference_reward(preference, c, &constraints), cfg.gamma);
    let (train, held) = if ds.trajectories.len() >= 10 { ds.split_every(10) } else { (ds.clone(), ds.clone()) };
    let encoder = Encoder::fit(&train, cfg.rtg_scale);
    let (_, params) = SeqNet::init(arch.policy_spec(), math::mix_seed(seed, 1))?;
    let starts: Vec<f64> = train.trajectories.iter().map(|t| t.rtg[0]).collect();
    let rtg_target = math::quantile(&starts, cfg.rtg_quantile);
    let policy = DtPolicy::new(*arch, encoder, params, *preference, constraints, cfg.gamma, rtg_target, action_bounds)?;
    let held_windows = all_windows(&held, cfg.seq_len);
    let sampler = BatchSampler::new(&train, math::mix_seed(seed, 2))?;
    fit_windows(policy, &train, sampler, &held_windows, cfg)
}

fn fit_windows(
    mut policy: DtPolicy,
    train: &Dataset,
    mut sampler: BatchSampler,
    held: &[Window],
    cfg: &PolicyTrainConfig,
) -> Result<(DtPolicy, PolicyCurve)> {
    let mut opt = OptimizerState::new(cfg.adam(), policy.params.len());
    let mut curve = PolicyCurve::default();
    let track = cfg.eval_every > 0 && !held.is_empty();
    if track {
        curve.heldout.push((0, heldout_mse(&policy, held)?));
    }
    for step in 0..cfg.steps {
        let batch = sampler.sample(train, cfg.batch, cfg.seq_len)?;
        let mut grad = policy.params.zeros_like();
        let loss = window_loss_grad(&policy.net, &policy.params, &policy.encoder, &batch, Some(&mut grad))?;
        if !loss.is_finite() {
            return Err(Error::Training(alloc::format!("non-finite BC loss at step {step}")));
        }
        curve.train.push(loss);
        clip_grad_norm(&mut grad, cfg.grad_clip);
        opt.config.lr = cfg.lr * cfg.lr_schedule.factor(step, cfg.steps);
        opt.step(&mut policy.params, &grad)?;
        if track && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            curve.heldout.push((step + 1, heldout_mse(&policy, held)?));
        }
    }
    Ok((policy, curve))
}

/// Continue training from `policy` on `ds` with its own encoder and target.
pub fn continue_bc(policy: DtPolicy, ds: &Dataset, cfg: &PolicyTrainConfig, seed: u64) -> Result<(DtPolicy, PolicyCurve)> {
    let sampler = BatchSampler::new(ds, seed)?;
    fit_windows(policy, ds, sampler, &[], cfg)
}

fn pair_loss_grad(policy: &DtPolicy, pairs: &[&RefinedPair], grad: Option<&mut [f64]>) -> Result<f64> {
    let len = pairs.iter().map(|p| p.context.len()).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.context.validate()?;
        inputs.push(policy.encoder.policy_context(&p.context).left_pad(len));
    }
    let mut tape = Tape::new();
    let out = policy.net.build_batch(&mut tape, &policy.params, &inputs)?;
    let pred = tape.value(out);
    let mut seed = Matrix::zeros(pred.rows, 1);
    let mut sum = 0.0;
    let n = pairs.len() as f64;
    for (b, p) in pairs.iter().enumerate() {
        let row = b * len + len - 1;
        let d = pred.data[row] - p.refined_action / policy.encoder.action_scale;
        sum += d * d;
        seed.data[row] = 2.0 * d / n;
    }
    if let Some(grad) = grad {
        tape.backward_from(out, seed, grad)?;
    }
    Ok(sum / n)
}

/// Mean squared error between the policy and the refined actions (scaled units).
pub fn sft_loss(policy: &DtPolicy, pairs: &[RefinedPair]) -> Result<f64> {
    let refs: Vec<&RefinedPair> = pairs.iter().collect();
    let mut sum = 0.0;
    for chunk in refs.chunks(256) {
        sum += pair_loss_grad(policy, chunk, None)? * chunk.len() as f64;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Supervised fine-tuning toward refined actions; `cfg.lr` is the
/// fine-tuning rate (1e-5 by convention) and `cfg.steps` the update count.
pub fn finetune_sft(policy: &DtPolicy, pairs: &[RefinedPair], cfg: &PolicyTrainConfig, seed: u64) -> Result<(DtPolicy, Vec<f64>)> {
    contract!(!pairs.is_empty(), "no refined pairs to fine-tune on");
    cfg.validate()?;
    for p in pairs {
        contract!(p.refined_action.is_finite(), "non-finite refined action");
        contract!(p.context.len() <= policy.arch.context, "pair context exceeds {}", policy.arch.context);
    }
    let mut policy = policy.clone();
    let mut opt = OptimizerState::new(cfg.adam(), policy.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch.min(pairs.len());
    for step in 0..cfg.steps {
        let batch: Vec<&RefinedPair> = (0..bs).map(|_| &pairs[rng.gen_range(0..pairs.len())]).collect();
        let mut grad = policy.params.zeros_like();
        let loss = pair_loss_grad(&policy, &batch, Some(&mut grad))?;
        if !loss.is_finite() {
            return Err(Error::Training(alloc::format!("non-finite SFT loss at step {step}")));
        }
        curve.push(loss);
        clip_grad_norm(&mut grad, cfg.grad_clip);
        opt.config.lr = cfg.lr * cfg.lr_schedule.factor(step, cfg.steps);
        opt.step(&mut policy.params, &grad)?;
    }
    Ok((policy, curve))
}

/// Hook that may replace the policy's action before it is executed.
pub trait ActionRefiner {
    fn reset(&mut self, episode_seed: u64);
    fn refine(&mut self, ctx: &SequenceContext, base: f64) -> Result<f64>;
}

/// Executes the policy's own action.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRefine;

impl ActionRefiner for NoRefine {
    fn reset(&mut self, _episode_seed: u64) {}

    fn refine(&mut self, _ctx: &SequenceContext, base: f64) -> Result<f64> {
        Ok(base)
    }
}

/// Runs a [`DtPolicy`] in the environment, tracking its context and the
/// remaining return-to-go.
#[derive(Debug, Clone)]
pub struct PolicyAgent<'a, R = NoRefine> {
    pub policy: &'a DtPolicy,
    pub refiner: R,
    ctx: SequenceContext,
    rtg: f64,
}

impl<'a> PolicyAgent<'a, NoRefine> {
    pub fn new(policy: &'a DtPolicy) -> Self {
        PolicyAgent::with_refiner(policy, NoRefine)
    }
}

impl<'a, R: ActionRefiner> PolicyAgent<'a, R> {
    pub fn with_refiner(policy: &'a DtPolicy, refiner: R) -> Self {
        PolicyAgent { policy, refiner, ctx: SequenceContext::new(policy.arch.context), rtg: policy.rtg_target }
    }

    pub fn context(&self) -> &SequenceContext {
        &self.ctx
    }
}

impl<R: ActionRefiner> BiddingAgent for PolicyAgent<'_, R> {
    fn reset(&mut self, episode_seed: u64) {
        self.ctx = SequenceContext::new(self.policy.arch.context);
        self.rtg = self.policy.rtg_target;
        self.refiner.reset(episode_seed);
    }

    fn act(&mut self, step: usize, state: &StateVector) -> Result<f64> {
        self.ctx.push_state(*state, self.rtg / self.policy.encoder.rtg_scale, step);
        let base = self.policy.act(&self.ctx)?;
        let a = self.refiner.refine(&self.ctx, base)?;
        self.ctx.push_action(a);
        Ok(a)
    }

    fn observe(&mut self, _action: f64, reward: &RewardComponents) {
        self.rtg = (self.rtg - self.policy.reward(reward)) / self.policy.gamma;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Trajectory, Transition};
    use crate::sim::STATE_DIM;
    use alloc::vec;

    fn synthetic(n_traj: usize, len: usize, seed: u64, action: impl Fn(&StateVector) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories = (0..n_traj)
            .map(|p| {
                let transitions = (0..len)
                    .map(|t| {
                        let mut s = StateVector::default();
                        for x in s.0.iter_mut().take(STATE_DIM) {
                            *x = rng.gen_range(0.0..1.0);
                        }
                        let mut reward = RewardComponents::zeros(1);
                        reward.value = rng.gen_range(0.0..2.0);
                        Transition { period_id: p as u64, advertiser_id: 0, t, action: action(&s), state: s, reward, done: t + 1 == len }
                    })
                    .collect();
                Trajectory::new(transitions).unwrap()
            })
            .collect();
        Dataset { trajectories, constraints: vec![1.0], seed }
    }

    fn arch() -> ArchConfig {
        ArchConfig { n_layers: 1, n_heads: 2, hidden: 16, context: 4, max_timestep: 8 }
    }

    fn cfg(steps: usize, lr: f64) -> PolicyTrainConfig {
        PolicyTrainConfig { lr, batch: 16, steps, seq_len: 4, rtg_scale: 10.0, eval_every: 0, ..PolicyTrainConfig::default() }
    }

    fn ctx_from(ds: &Dataset, traj: usize, t: usize) -> SequenceContext {
        let w = Window::from_trajectory(ds, traj, t, 4);
        SequenceContext::from_window(&w, 3, 10.0)
    }

    #[test]
    fn zero_head_acts_zero() {
        let ds = synthetic(2, 4, 1, |_| 3.0);
        let (mut p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(0, 1e-3), (-10.0, 10.0), 1).unwrap();
        p.params.tensor_mut("head.weight").unwrap().fill(0.0);
        p.params.tensor_mut("head.bias").unwrap().fill(0.0);
        assert_eq!(p.act(&ctx_from(&ds, 0, 3)).unwrap(), 0.0);
        assert_eq!(p.act(&ctx_from(&ds, 1, 0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_context_is_a_contract_error() {
        let ds = synthetic(2, 4, 1, |_| 3.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(0, 1e-3), (0.0, 10.0), 1).unwrap();
        assert!(matches!(p.act(&SequenceContext::new(4)), Err(Error::Contract(_))));
    }

    #[test]
    fn actions_are_clipped_and_deterministic() {
        let ds = synthetic(4, 4, 2, |_| 5.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(200, 3e-3), (0.0, 2.0), 3).unwrap();
        let c = ctx_from(&ds, 0, 2);
        let a = p.act(&c).unwrap();
        assert_eq!(a, 2.0);
        assert_eq!(a.to_bits(), p.act(&c.clone()).unwrap().to_bits());
    }

    #[test]
    fn constant_actions_are_regressed() {
        let ds = synthetic(20, 4, 3, |_| 7.0);
        let held = synthetic(3, 4, 99, |_| 7.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(300, 3e-3), (0.0, 100.0), 4).unwrap();
        for traj in 0..3 {
            for t in 0..4 {
                let a = p.act(&ctx_from(&held, traj, t)).unwrap();
                assert!((a - 7.0).abs() < 0.05 * 7.0, "{a}");
            }
        }
    }

    #[test]
    fn sft_fixed_point_leaves_parameters_nearly_unchanged() {
        let ds = synthetic(4, 4, 5, |s| s.0[0] * 4.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(50, 3e-3), (-100.0, 100.0), 5).unwrap();
        let pairs: Vec<RefinedPair> = (0..4)
            .map(|t| {
                let context = ctx_from(&ds, 0, t);
                RefinedPair { refined_action: p.act(&context).unwrap(), context }
            })
            .collect();
        assert!(sft_loss(&p, &pairs).unwrap() < 1e-20);
        let sft = PolicyTrainConfig { lr: 1e-5, weight_decay: 0.0, steps: 5, batch: 4, ..cfg(5, 1e-5) };
        let (q, _) = finetune_sft(&p, &pairs, &sft, 1).unwrap();
        let moved = p.params.values.iter().zip(&q.params.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-9, "{moved}");
    }

    #[test]
    fn sft_single_pair_converges() {
        let ds = synthetic(4, 4, 6, |s| s.0[1] * 4.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(50, 3e-3), (-100.0, 100.0), 6).unwrap();
        let context = ctx_from(&ds, 1, 2);
        let before = p.act(&context).unwrap();
        let target = before + 3.0;
        let pair = RefinedPair { context: context.clone(), refined_action: target };
        let sft = PolicyTrainConfig { lr: 1e-3, weight_decay: 0.0, ..cfg(500, 1e-3) };
        let (q, _) = finetune_sft(&p, &[pair], &sft, 2).unwrap();
        let after = q.act(&context).unwrap();
        assert!((after - target).abs() <= 0.1 * (before - target).abs(), "{before} -> {after} (target {target})");
    }

    #[test]
    fn empty_pairs_rejected() {
        let ds = synthetic(2, 4, 7, |_| 1.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(0, 1e-3), (0.0, 10.0), 1).unwrap();
        assert!(finetune_sft(&p, &[], &cfg(1, 1e-5), 0).is_err());
    }

    #[test]
    fn rtg_decrements_by_realized_reward() {
        let ds = synthetic(2, 4, 8, |_| 1.0);
        let (p, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch(), &cfg(0, 1e-3), (0.0, 10.0), 1).unwrap();
        let mut agent = PolicyAgent::new(&p);
        agent.reset(0);
        agent.act(0, &StateVector::default()).unwrap();
        let mut r = RewardComponents::zeros(1);
        r.value = 2.5;
        agent.observe(0.0, &r);
        agent.act(1, &StateVector::default()).unwrap();
        let expect = (p.rtg_target - 2.5) / p.gamma / p.encoder.rtg_scale;
        assert!((agent.context().rtg[1] - expect).abs() < 1e-12);
    }
}
