//! Every tunable of a run as one flat key space.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, `--env`
//! file, `--set key=value` pairs, dedicated flags. The resolved settings are
//! written back as `config.snapshot`, which is itself a valid `--config`.

use gas_core::approx::{AttentionScope, LrSchedule};
use gas_core::critic::{IqlConfig, PreferenceKind, PreferenceSpec};
use gas_core::encode::ArchConfig;
use gas_core::eval::AblationKind;
use gas_core::math::mix_seed;
use gas_core::policy::PolicyTrainConfig;
use gas_core::search::{SearchConfig, Selection, TieBreak};
use gas_core::sim::{ActionMode, EnvConfig};

use crate::error::{LabError, Result};
use crate::kv::{parse_bool, parse_list, parse_value, render_list, KvFile};

pub const ENV_KEYS: [&str; 11] = [
    "impressions_per_step",
    "period_length",
    "value_dist.beta_a",
    "value_dist.beta_b",
    "opponent_mix.constant",
    "opponent_mix.pacing",
    "budget",
    "cpa_constraint",
    "seed",
    "lambda_max",
    "action_mode",
];

/// Where budget fraction 1.0 sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceBudget {
    /// `env.budget`.
    Env,
    /// Smallest budget the oracle pacer spends at least 95% of.
    Calibrated,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub env: EnvConfig,
    pub data_periods: usize,
    pub data_budget_fracs: Vec<f64>,
    pub policy_arch: ArchConfig,
    pub policy: PolicyTrainConfig,
    pub policy_preference: PreferenceKind,
    pub critic_arch: ArchConfig,
    pub critic: IqlConfig,
    pub critic_members: usize,
    pub critic_preferences: Vec<PreferenceKind>,
    /// `w` of the weighted-sum preference.
    pub weighted_sum_w: f64,
    pub search: SearchConfig,
    /// Proposals are drawn from `[1 - range, 1 + range]` times the base action.
    pub search_range: f64,
    pub sft: PolicyTrainConfig,
    pub sft_strict: bool,
    pub eval_budget_fracs: Vec<f64>,
    pub eval_periods: usize,
    pub beta: f64,
    pub reference_budget: ReferenceBudget,
    pub ablate_kind: AblationKind,
    pub ablate_grid: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let env = EnvConfig::default();
        let arch = ArchConfig { max_timestep: env.period_length, ..ArchConfig::default() };
        let policy = PolicyTrainConfig::default();
        Settings {
            seed: 1,
            env,
            data_periods: 100,
            data_budget_fracs: vec![0.5, 1.0, 1.5],
            policy_arch: arch,
            policy,
            policy_preference: PreferenceKind::ScoreProduct,
            critic_arch: arch,
            critic: IqlConfig::default(),
            critic_members: 3,
            critic_preferences: vec![PreferenceKind::ScoreProduct],
            weighted_sum_w: 1000.0,
            search: SearchConfig::default(),
            search_range: 0.1,
            sft: PolicyTrainConfig { lr: 1e-5, steps: 2000, eval_every: 0, ..policy },
            sft_strict: true,
            eval_budget_fracs: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            eval_periods: 50,
            beta: 2.0,
            reference_budget: ReferenceBudget::Env,
            ablate_kind: AblationKind::SearchBudget,
            ablate_grid: vec![1.0, 3.0, 5.0, 7.0],
        }
    }
}

fn schedule_str(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Constant => "constant",
        LrSchedule::Cosine => "cosine",
    }
}

fn parse_schedule(key: &str, v: &str) -> Result<LrSchedule> {
    match v {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(LabError::Config(format!("invalid value `{v}` for `{key}` (constant|cosine)"))),
    }
}

fn parse_preference(key: &str, v: &str) -> Result<PreferenceKind> {
    PreferenceKind::parse(v)
        .ok_or_else(|| LabError::Config(format!("invalid value `{v}` for `{key}` (value_only|score_product|weighted_sum)")))
}

fn arch_pairs(prefix: &str, a: &ArchConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.n_layers"), a.n_layers.to_string()));
    out.push((format!("{prefix}.n_heads"), a.n_heads.to_string()));
    out.push((format!("{prefix}.hidden"), a.hidden.to_string()));
    out.push((format!("{prefix}.context"), a.context.to_string()));
}

fn set_arch(a: &mut ArchConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "n_layers" => a.n_layers = parse_value(key, v)?,
        "n_heads" => a.n_heads = parse_value(key, v)?,
        "hidden" => a.hidden = parse_value(key, v)?,
        "context" => a.context = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_pairs(prefix: &str, c: &PolicyTrainConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.lr"), c.lr.to_string()));
    out.push((format!("{prefix}.weight_decay"), c.weight_decay.to_string()));
    out.push((format!("{prefix}.batch"), c.batch.to_string()));
    out.push((format!("{prefix}.steps"), c.steps.to_string()));
    out.push((format!("{prefix}.grad_clip"), c.grad_clip.to_string()));
    out.push((format!("{prefix}.lr_schedule"), schedule_str(c.lr_schedule).to_string()));
}

fn set_train(c: &mut PolicyTrainConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "lr" => c.lr = parse_value(key, v)?,
        "weight_decay" => c.weight_decay = parse_value(key, v)?,
        "batch" => c.batch = parse_value(key, v)?,
        "steps" => c.steps = parse_value(key, v)?,
        "grad_clip" => c.grad_clip = parse_value(key, v)?,
        "lr_schedule" => c.lr_schedule = parse_schedule(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn env_pairs(e: &EnvConfig) -> Vec<(String, String)> {
    let mode = match e.action_mode {
        ActionMode::Absolute => "absolute",
        ActionMode::Increment => "increment",
    };
    let values = [
        e.impressions_per_step.to_string(),
        e.period_length.to_string(),
        e.value_dist.a.to_string(),
        e.value_dist.b.to_string(),
        e.opponent_mix.constant.to_string(),
        e.opponent_mix.pacing.to_string(),
        e.budget.to_string(),
        e.cpa_constraint.to_string(),
        e.seed.to_string(),
        e.lambda_max.to_string(),
        mode.to_string(),
    ];
    ENV_KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
}

fn set_env(e: &mut EnvConfig, field: &str, v: &str) -> Result<bool> {
    let key = field;
    match field {
        "impressions_per_step" => e.impressions_per_step = parse_value(key, v)?,
        "period_length" => e.period_length = parse_value(key, v)?,
        "value_dist.beta_a" => e.value_dist.a = parse_value(key, v)?,
        "value_dist.beta_b" => e.value_dist.b = parse_value(key, v)?,
        "opponent_mix.constant" => e.opponent_mix.constant = parse_value(key, v)?,
        "opponent_mix.pacing" => e.opponent_mix.pacing = parse_value(key, v)?,
        "budget" => e.budget = parse_value(key, v)?,
        "cpa_constraint" => e.cpa_constraint = parse_value(key, v)?,
        "seed" => e.seed = parse_value(key, v)?,
        "lambda_max" => e.lambda_max = parse_value(key, v)?,
        "action_mode" => {
            e.action_mode = match v {
                "absolute" => ActionMode::Absolute,
                "increment" => ActionMode::Increment,
                _ => return Err(LabError::Config(format!("invalid value `{v}` for `action_mode` (absolute|increment)"))),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Strict environment file: every key of [`ENV_KEYS`] present, nothing else.
pub fn env_from_kv(kv: &KvFile, origin: &str) -> Result<EnvConfig> {
    if let Some(k) = kv.entries.keys().find(|k| !ENV_KEYS.contains(&k.as_str())) {
        return Err(LabError::Config(format!("{origin}: unknown key `{k}`")));
    }
    if let Some(k) = ENV_KEYS.iter().find(|k| kv.get(k).is_none()) {
        return Err(LabError::Config(format!("{origin}: missing key `{k}`")));
    }
    let mut env = EnvConfig::default();
    for (k, v) in &kv.entries {
        set_env(&mut env, k, v)?;
    }
    env.validate()?;
    Ok(env)
}

impl Settings {
    /// All keys with their current values, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("seed".to_string(), self.seed.to_string())];
        out.extend(env_pairs(&self.env).into_iter().map(|(k, v)| (format!("env.{k}"), v)));
        out.push(("data.n_periods".into(), self.data_periods.to_string()));
        out.push(("data.budget_fracs".into(), render_list(&self.data_budget_fracs)));
        arch_pairs("policy", &self.policy_arch, &mut out);
        train_pairs("policy", &self.policy, &mut out);
        out.push(("policy.seq_len".into(), self.policy.seq_len.to_string()));
        out.push(("policy.gamma".into(), self.policy.gamma.to_string()));
        out.push(("policy.rtg_scale".into(), self.policy.rtg_scale.to_string()));
        out.push(("policy.rtg_quantile".into(), self.policy.rtg_quantile.to_string()));
        out.push(("policy.eval_every".into(), self.policy.eval_every.to_string()));
        out.push(("policy.preference".into(), self.policy_preference.as_str().into()));
        arch_pairs("critic", &self.critic_arch, &mut out);
        let c = &self.critic;
        out.push(("critic.lr".into(), c.lr.to_string()));
        out.push(("critic.weight_decay".into(), c.weight_decay.to_string()));
        out.push(("critic.batch".into(), c.batch.to_string()));
        out.push(("critic.steps".into(), c.steps.to_string()));
        out.push(("critic.grad_clip".into(), c.grad_clip.to_string()));
        out.push(("critic.lr_schedule".into(), schedule_str(c.lr_schedule).into()));
        out.push(("critic.seq_len".into(), c.seq_len.to_string()));
        out.push(("critic.gamma".into(), c.gamma.to_string()));
        out.push(("critic.expectile".into(), c.expectile.to_string()));
        out.push(("critic.tau_soft".into(), c.tau_soft.to_string()));
        out.push(("critic.reward_scale".into(), c.reward_scale.map_or("auto".into(), |s| s.to_string())));
        let scope = match c.v_scope {
            AttentionScope::Causal => "causal",
            AttentionScope::SelfOnly => "self",
        };
        out.push(("critic.v_scope".into(), scope.into()));
        out.push(("critic.members".into(), self.critic_members.to_string()));
        let prefs: Vec<&str> = self.critic_preferences.iter().map(|p| p.as_str()).collect();
        out.push(("critic.preferences".into(), prefs.join(",")));
        out.push(("critic.weighted_sum_w".into(), self.weighted_sum_w.to_string()));
        let s = &self.search;
        out.push(("search.n_proposals".into(), s.n_proposals.to_string()));
        out.push(("search.range".into(), self.search_range.to_string()));
        out.push(("search.m_critics".into(), s.m_critics.to_string()));
        out.push(("search.tie_break".into(), s.tie_break.as_str().into()));
        let sel = match s.selection {
            Selection::Argmax => "argmax".to_string(),
            Selection::SoftmaxVotes { temperature } => format!("softmax:{temperature}"),
        };
        out.push(("search.selection".into(), sel));
        train_pairs("sft", &self.sft, &mut out);
        out.push(("sft.strict".into(), self.sft_strict.to_string()));
        out.push(("eval.budget_fracs".into(), render_list(&self.eval_budget_fracs)));
        out.push(("eval.n_periods".into(), self.eval_periods.to_string()));
        out.push(("eval.beta".into(), self.beta.to_string()));
        let reference = match self.reference_budget {
            ReferenceBudget::Env => "env".to_string(),
            ReferenceBudget::Calibrated => "calibrated".to_string(),
            ReferenceBudget::Fixed(b) => b.to_string(),
        };
        out.push(("eval.reference_budget".into(), reference));
        out.push(("ablate.kind".into(), self.ablate_kind.as_str().into()));
        out.push(("ablate.grid".into(), render_list(&self.ablate_grid)));
        out
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || LabError::Config(format!("unknown key `{key}`"));
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let known = match section {
            "" if field == "seed" => {
                self.seed = parse_value(key, v)?;
                true
            }
            "env" => set_env(&mut self.env, field, v)?,
            "data" => match field {
                "n_periods" => {
                    self.data_periods = parse_value(key, v)?;
                    true
                }
                "budget_fracs" => {
                    self.data_budget_fracs = parse_list(key, v)?;
                    true
                }
                _ => false,
            },
            "policy" => {
                set_arch(&mut self.policy_arch, field, key, v)? || set_train(&mut self.policy, field, key, v)? || {
                    let p = &mut self.policy;
                    match field {
                        "seq_len" => p.seq_len = parse_value(key, v)?,
                        "gamma" => p.gamma = parse_value(key, v)?,
                        "rtg_scale" => p.rtg_scale = parse_value(key, v)?,
                        "rtg_quantile" => p.rtg_quantile = parse_value(key, v)?,
                        "eval_every" => p.eval_every = parse_value(key, v)?,
                        "preference" => self.policy_preference = parse_preference(key, v)?,
                        _ => return Err(unknown()),
                    }
                    true
                }
            }
            "critic" => {
                set_arch(&mut self.critic_arch, field, key, v)? || {
                    let c = &mut self.critic;
                    match field {
                        "lr" => c.lr = parse_value(key, v)?,
                        "weight_decay" => c.weight_decay = parse_value(key, v)?,
                        "batch" => c.batch = parse_value(key, v)?,
                        "steps" => c.steps = parse_value(key, v)?,
                        "grad_clip" => c.grad_clip = parse_value(key, v)?,
                        "lr_schedule" => c.lr_schedule = parse_schedule(key, v)?,
                        "seq_len" => c.seq_len = parse_value(key, v)?,
                        "gamma" => c.gamma = parse_value(key, v)?,
                        "expectile" => c.expectile = parse_value(key, v)?,
                        "tau_soft" => c.tau_soft = parse_value(key, v)?,
                        "reward_scale" => c.reward_scale = if v == "auto" { None } else { Some(parse_value(key, v)?) },
                        "v_scope" => {
                            c.v_scope = match v {
                                "causal" => AttentionScope::Causal,
                                "self" => AttentionScope::SelfOnly,
                                _ => return Err(LabError::Config(format!("invalid value `{v}` for `{key}` (causal|self)"))),
                            }
                        }
                        "members" => self.critic_members = parse_value(key, v)?,
                        "preferences" => {
                            self.critic_preferences = v.split(',').map(|p| parse_preference(key, p.trim())).collect::<Result<_>>()?
                        }
                        "weighted_sum_w" => self.weighted_sum_w = parse_value(key, v)?,
                        _ => return Err(unknown()),
                    }
                    true
                }
            }
            "search" => {
                let s = &mut self.search;
                match field {
                    "n_proposals" => s.n_proposals = parse_value(key, v)?,
                    "range" => self.search_range = parse_value(key, v)?,
                    "m_critics" => s.m_critics = parse_value(key, v)?,
                    "tie_break" => {
                        s.tie_break = TieBreak::parse(v)
                            .ok_or_else(|| LabError::Config(format!("invalid value `{v}` for `{key}` (prefer_base|lowest_index)")))?
                    }
                    "selection" => {
                        s.selection = match v.split_once(':') {
                            None if v == "argmax" => Selection::Argmax,
                            Some(("softmax", t)) => Selection::SoftmaxVotes { temperature: parse_value(key, t)? },
                            _ => return Err(LabError::Config(format!("invalid value `{v}` for `{key}` (argmax|softmax:T)"))),
                        }
                    }
                    _ => return Err(unknown()),
                }
                true
            }
            "sft" => {
                set_train(&mut self.sft, field, key, v)? || {
                    match field {
                        "strict" => self.sft_strict = parse_bool(key, v)?,
                        _ => return Err(unknown()),
                    }
                    true
                }
            }
            "eval" => {
                match field {
                    "budget_fracs" => self.eval_budget_fracs = parse_list(key, v)?,
                    "n_periods" => self.eval_periods = parse_value(key, v)?,
                    "beta" => self.beta = parse_value(key, v)?,
                    "reference_budget" => {
                        self.reference_budget = match v {
                            "env" => ReferenceBudget::Env,
                            "calibrated" => ReferenceBudget::Calibrated,
                            _ => ReferenceBudget::Fixed(parse_value(key, v)?),
                        }
                    }
                    _ => return Err(unknown()),
                }
                true
            }
            "ablate" => {
                match field {
                    "kind" => {
                        self.ablate_kind = AblationKind::parse(v).ok_or_else(|| {
                            LabError::Config(format!("invalid value `{v}` for `{key}` (search_budget|n_critics|search_range)"))
                        })?
                    }
                    "grid" => self.ablate_grid = parse_list(key, v)?,
                    _ => return Err(unknown()),
                }
                true
            }
            _ => false,
        };
        if !known {
            return Err(unknown());
        }
        Ok(())
    }

    /// Apply a settings file. Environment keys, if any, must form a complete
    /// environment block.
    pub fn apply_file(&mut self, kv: &KvFile, origin: &str) -> Result<()> {
        let env_keys: Vec<&String> = kv.entries.keys().filter(|k| k.starts_with("env.")).collect();
        if !env_keys.is_empty() {
            let mut block = KvFile::default();
            for k in env_keys {
                block.entries.insert(k["env.".len()..].to_string(), kv.entries[k].clone());
            }
            self.env = env_from_kv(&block, origin)?;
        }
        for (k, v) in kv.entries.iter().filter(|(k, _)| !k.starts_with("env.")) {
            self.set(k, v).map_err(|e| LabError::Config(format!("{origin}: {e}")))?;
        }
        Ok(())
    }

    /// Fill derived fields and check every section.
    pub fn finish(mut self) -> Result<Self> {
        self.env.validate()?;
        self.policy_arch.max_timestep = self.env.period_length;
        self.critic_arch.max_timestep = self.env.period_length;
        self.search.seed = self.stage_seed(4);
        if !(0.0..1.0).contains(&self.search_range) {
            return Err(LabError::Config(format!("search.range must lie in [0, 1), got {}", self.search_range)));
        }
        self.search = self.search.with_range(self.search_range);
        self.sft.seq_len = self.policy.seq_len;
        self.sft.gamma = self.policy.gamma;
        self.sft.rtg_scale = self.policy.rtg_scale;
        self.sft.rtg_quantile = self.policy.rtg_quantile;
        self.policy.validate()?;
        self.sft.validate()?;
        self.critic.validate()?;
        self.search.validate()?;
        let fracs_ok = |xs: &[f64]| !xs.is_empty() && xs.iter().all(|f| *f > 0.0 && f.is_finite());
        if !fracs_ok(&self.data_budget_fracs) || !fracs_ok(&self.eval_budget_fracs) {
            return Err(LabError::Config("budget fractions must be a non-empty list of positive numbers".into()));
        }
        if self.data_periods == 0 || self.eval_periods == 0 {
            return Err(LabError::Config("n_periods must be >= 1".into()));
        }
        if self.critic_members == 0 || self.critic_preferences.is_empty() {
            return Err(LabError::Config("critic.members and critic.preferences must be non-empty".into()));
        }
        if self.search.m_critics > self.critic_members {
            return Err(LabError::Config(format!(
                "search.m_critics {} exceeds critic.members {}",
                self.search.m_critics, self.critic_members
            )));
        }
        if self.policy.seq_len > self.policy_arch.context || self.critic.seq_len > self.critic_arch.context {
            return Err(LabError::Config("seq_len cannot exceed the architecture context".into()));
        }
        if let ReferenceBudget::Fixed(b) = self.reference_budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(LabError::Config(format!("eval.reference_budget must be positive, got {b}")));
            }
        }
        self.preference(self.policy_preference).validate()?;
        Ok(self)
    }

    /// Seed of one pipeline stage, derived from the global and environment seeds.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        mix_seed(mix_seed(self.seed, self.env.seed), stage)
    }

    pub fn preference(&self, kind: PreferenceKind) -> PreferenceSpec {
        match kind {
            PreferenceKind::ValueOnly => PreferenceSpec { beta: self.beta, ..PreferenceSpec::value_only() },
            PreferenceKind::ScoreProduct => PreferenceSpec { beta: self.beta, ..PreferenceSpec::score_product() },
            PreferenceKind::WeightedSum => PreferenceSpec { beta: self.beta, ..PreferenceSpec::weighted_sum(self.weighted_sum_w) },
        }
    }

    pub fn snapshot(&self) -> String {
        let mut text = String::from("# resolved settings; usable as --config\n");
        text.push_str(&crate::kv::render(&self.pairs()));
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut s = Settings::default();
        s.set("search.range", "0.2").unwrap();
        s.set("critic.reward_scale", "3.5").unwrap();
        s.set("search.selection", "softmax:0.5").unwrap();
        s.set("critic.preferences", "score_product,value_only").unwrap();
        s.set("eval.reference_budget", "1234.5").unwrap();
        let s = s.finish().unwrap();
        let mut back = Settings::default();
        back.apply_file(&KvFile::parse(&s.snapshot(), "snap").unwrap(), "snap").unwrap();
        assert_eq!(back.finish().unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = Settings::default();
        assert!(s.set("search.nope", "1").is_err());
        assert!(s.set("nope", "1").is_err());
        assert!(s.set("policy.zzz", "1").is_err());
    }

    #[test]
    fn env_file_is_strict() {
        let full = crate::kv::render(&env_pairs(&EnvConfig::default()));
        assert_eq!(env_from_kv(&KvFile::parse(&full, "e").unwrap(), "e").unwrap(), EnvConfig::default());
        let missing = full.lines().filter(|l| !l.starts_with("budget")).collect::<Vec<_>>().join("\n");
        let err = env_from_kv(&KvFile::parse(&missing, "e").unwrap(), "e").unwrap_err();
        assert!(err.to_string().contains("missing key `budget`"), "{err}");
        let extra = format!("{full}colour = red\n");
        let err = env_from_kv(&KvFile::parse(&extra, "e").unwrap(), "e").unwrap_err();
        assert!(err.to_string().contains("unknown key `colour`"), "{err}");
    }

    #[test]
    fn partial_env_block_in_config_is_rejected() {
        let mut s = Settings::default();
        let kv = KvFile::parse("env.budget = 10\n", "c").unwrap();
        assert!(s.apply_file(&kv, "c").is_err());
    }

    #[test]
    fn too_many_critics_for_the_ensemble() {
        let mut s = Settings::default();
        s.set("search.m_critics", "5").unwrap();
        assert!(s.finish().is_err());
    }
}
