//! The stages behind each subcommand. Every stage reads its inputs from and
//! writes its outputs to a run directory, and records the resolved settings
//! as `config.snapshot`.

use std::fs;
use std::path::{Path, PathBuf};

use gas_core::critic::{train_critics as fit_critics, CriticEnsemble, PreferenceKind};
use gas_core::data::{collect_dataset_with_budgets, Dataset, DatasetManifest};
use gas_core::eval::{
    ablation_suite, calibrate_reference_budget, AblationKind, run_experiment, AblationRow, AblationSetup, ExperimentSpec, MetricReport, NamedAgent,
};
use gas_core::policy::{all_windows, finetune_sft, train_policy_bc, DtPolicy, PolicyAgent, SequenceContext};
use gas_core::search::{gas_sft_refine, q_matrix, qvote_ensemble, GasRefiner, QEnsemble, RefineConfig, TieBreak};
use gas_core::sim::{EnvConfig, ScriptedAgent, ScriptedPolicy};

use crate::checkpoint::{ensemble_manifest_name, load_ensemble, load_policy, save_ensemble, save_policy};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{LabError, Result};
use crate::report::{paired_rows, write_ablation, write_aggregate, write_episodes, write_paired, write_table, PairedRow};
use crate::settings::{ReferenceBudget, Settings};

const SEED_DATA: u64 = 1;
const SEED_POLICY: u64 = 2;
const SEED_EVAL: u64 = 5;
const SEED_SFT: u64 = 6;
const SEED_CALIBRATE: u64 = 7;

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let run = RunDir { root: root.to_path_buf() };
        for d in [run.checkpoints(), run.datasets(), run.reports()] {
            fs::create_dir_all(&d).map_err(|e| LabError::io(&d, e))?;
        }
        Ok(run)
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn dataset_records(&self) -> PathBuf {
        self.datasets().join("train.jsonl")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.datasets().join("manifest.json")
    }
    pub fn policy(&self) -> PathBuf {
        self.checkpoints().join("policy.ckpt")
    }
    pub fn sft_policy(&self) -> PathBuf {
        self.checkpoints().join("policy_sft.ckpt")
    }
    pub fn ensemble(&self, kind: PreferenceKind, s: &Settings) -> PathBuf {
        self.checkpoints().join(ensemble_manifest_name(&s.preference(kind)))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }

    pub fn write_snapshot(&self, s: &Settings) -> Result<()> {
        let p = self.snapshot();
        fs::write(&p, s.snapshot()).map_err(|e| LabError::io(&p, e))
    }

    fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(LabError::Config(format!("{} not found; run `gas {producer}` first", path.display())))
        }
    }

    pub fn load_dataset(&self) -> Result<(Dataset, DatasetManifest)> {
        let records = self.require(self.dataset_records(), "gen-data")?;
        read_dataset(&records, &self.dataset_manifest())
    }

    pub fn load_policy(&self) -> Result<DtPolicy> {
        load_policy(&self.require(self.policy(), "train-policy")?)
    }

    pub fn load_ensemble(&self, kind: PreferenceKind, s: &Settings) -> Result<CriticEnsemble> {
        load_ensemble(&self.require(self.ensemble(kind, s), "train-critics")?)
    }
}

/// Budget of fraction 1.0.
pub fn reference_budget(s: &Settings) -> Result<f64> {
    Ok(match s.reference_budget {
        ReferenceBudget::Env => s.env.budget,
        ReferenceBudget::Fixed(b) => b,
        ReferenceBudget::Calibrated => calibrate_reference_budget(&s.env, 5, 0.95, s.stage_seed(SEED_CALIBRATE))?,
    })
}

pub fn experiment_spec(s: &Settings) -> Result<ExperimentSpec> {
    Ok(ExperimentSpec {
        budget_fracs: s.eval_budget_fracs.clone(),
        reference_budget: reference_budget(s)?,
        n_periods: s.eval_periods,
        seed: s.stage_seed(SEED_EVAL),
        beta: s.beta,
    })
}

/// Logged behavior data over the configured budget fractions.
pub fn gen_data(s: &Settings, run: &RunDir) -> Result<DatasetManifest> {
    run.write_snapshot(s)?;
    let env = EnvConfig { budget: reference_budget(s)?, ..s.env.clone() };
    let ds = collect_dataset_with_budgets(&ScriptedPolicy::behavior_mix(&env), &env, &s.data_budget_fracs, s.data_periods, s.stage_seed(SEED_DATA))?;
    write_dataset(&ds, &s.env, &run.dataset_records(), &run.dataset_manifest())
}

pub fn train_policy(s: &Settings, run: &RunDir) -> Result<DtPolicy> {
    run.write_snapshot(s)?;
    let (ds, _) = run.load_dataset()?;
    let pref = s.preference(s.policy_preference);
    let (policy, curve) = train_policy_bc(&ds, &pref, &s.policy_arch, &s.policy, s.env.action_bounds(), s.stage_seed(SEED_POLICY))?;
    save_policy(&policy, &run.policy())?;
    let rows: Vec<Vec<String>> = curve.heldout.iter().map(|(step, mse)| vec![step.to_string(), mse.to_string()]).collect();
    write_table(&run.report("policy_heldout.csv"), &["step", "heldout_mse"], &rows)?;
    let rows: Vec<Vec<String>> = curve.train.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]).collect();
    write_table(&run.report("policy_train.csv"), &["step", "train_mse"], &rows)?;
    Ok(policy)
}

/// One ensemble per configured preference.
pub fn train_critics(s: &Settings, run: &RunDir) -> Result<Vec<CriticEnsemble>> {
    run.write_snapshot(s)?;
    let (ds, _) = run.load_dataset()?;
    let mut out = Vec::new();
    for kind in &s.critic_preferences {
        let pref = s.preference(*kind);
        let (ens, log) = fit_critics(&ds, &pref, &s.critic_arch, &s.critic, s.critic_members, s.seed)?;
        save_ensemble(&ens, &run.checkpoints())?;
        let mut rows = Vec::new();
        for (m, curve) in ens.members.iter().zip(&log.curves) {
            for (i, l) in curve.iter().enumerate() {
                rows.push(vec![m.seed.to_string(), (i + 1).to_string(), l.loss_v.to_string(), l.loss_q.to_string()]);
            }
        }
        write_table(&run.report(&format!("critic_{}_train.csv", kind.as_str())), &["member_seed", "step", "loss_v", "loss_q"], &rows)?;
        out.push(ens);
    }
    Ok(out)
}

pub struct ReportSet {
    pub report: MetricReport,
    pub paired: Vec<PairedRow>,
}

fn write_report_set(run: &RunDir, prefix: &str, report: MetricReport, baseline: &str) -> Result<ReportSet> {
    write_episodes(&report, &run.report(&format!("{prefix}_episodes.csv")))?;
    write_aggregate(&report, &run.report(&format!("{prefix}_aggregate.csv")))?;
    let paired = paired_rows(&report, baseline)?;
    write_paired(&paired, &run.report(&format!("{prefix}_paired.csv")))?;
    Ok(ReportSet { report, paired })
}

fn primary_preference(s: &Settings) -> PreferenceKind {
    s.critic_preferences[0]
}

/// Base policy against GAS-infer with the primary ensemble, on paired seeds.
pub fn infer(s: &Settings, run: &RunDir) -> Result<ReportSet> {
    run.write_snapshot(s)?;
    let policy = run.load_policy()?;
    let ens = run.load_ensemble(primary_preference(s), s)?;
    let mut agents = vec![
        NamedAgent::new("base", PolicyAgent::new(&policy)),
        NamedAgent::new("gas", PolicyAgent::with_refiner(&policy, GasRefiner::new(&ens, s.search, policy.action_bounds))),
    ];
    let report = run_experiment(&mut agents, &s.env, &experiment_spec(s)?)?;
    write_report_set(run, "infer", report, "base")
}

/// Mean ensemble vote share and mean Q of two policies' actions on the
/// states of `held`, each decided from its logged history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteComparison {
    pub n_states: usize,
    pub votes_before: f64,
    pub votes_after: f64,
    pub q_before: f64,
    pub q_after: f64,
}

pub fn compare_votes(before: &DtPolicy, after: &DtPolicy, ens: &dyn QEnsemble, m: usize, held: &Dataset, seq_len: usize) -> Result<VoteComparison> {
    let mut c = VoteComparison { n_states: 0, votes_before: 0.0, votes_after: 0.0, q_before: 0.0, q_after: 0.0 };
    for w in all_windows(held, seq_len) {
        let ctx = SequenceContext::from_window(&w, w.len() - 1, before.encoder.rtg_scale);
        let actions = [before.act(&ctx)?, after.act(&ctx)?];
        let q = q_matrix(ens, m, &ctx, &actions)?;
        let tally = qvote_ensemble(&q, TieBreak::PreferBase, 0)?;
        c.votes_before += tally.total_votes[0];
        c.votes_after += tally.total_votes[1];
        c.q_before += q.iter().map(|r| r[0]).sum::<f64>() / m as f64;
        c.q_after += q.iter().map(|r| r[1]).sum::<f64>() / m as f64;
        c.n_states += 1;
    }
    let n = c.n_states.max(1) as f64;
    c.votes_before /= n;
    c.votes_after /= n;
    c.q_before /= n;
    c.q_after /= n;
    Ok(c)
}

pub struct SftOutcome {
    pub policy: DtPolicy,
    pub n_pairs: usize,
    pub n_transitions: usize,
    pub votes: VoteComparison,
}

/// Search-refined logged actions, then supervised fine-tuning toward them.
/// Every tenth trajectory is kept out of refinement for the vote comparison.
pub fn sft(s: &Settings, run: &RunDir) -> Result<SftOutcome> {
    run.write_snapshot(s)?;
    let policy = run.load_policy()?;
    let ens = run.load_ensemble(primary_preference(s), s)?;
    let (mut ds, _) = run.load_dataset()?;
    let pref = policy.preference;
    let constraints = ds.constraints.clone();
    ds.apply_rewards(|c| gas_core::critic::preference_reward(&pref, c, &constraints), policy.gamma);
    let (train, held) = ds.split_every(10);
    let refine = RefineConfig { strict_improvement: s.sft_strict, context_len: s.policy.seq_len, rtg_scale: policy.encoder.rtg_scale };
    let pairs = gas_sft_refine(&train, &ens, &s.search, &refine, policy.action_bounds)?;
    if pairs.is_empty() {
        return Err(LabError::Config("search produced no refined pairs; nothing to fine-tune on".into()));
    }
    let (tuned, curve) = finetune_sft(&policy, &pairs, &s.sft, s.stage_seed(SEED_SFT))?;
    save_policy(&tuned, &run.sft_policy())?;
    let votes = compare_votes(&policy, &tuned, &ens, s.search.m_critics, &held, s.policy.seq_len)?;
    let rows = vec![
        vec!["pairs".into(), pairs.len().to_string()],
        vec!["transitions".into(), train.n_transitions().to_string()],
        vec!["loss_first".into(), curve.first().copied().unwrap_or(0.0).to_string()],
        vec!["loss_last".into(), curve.last().copied().unwrap_or(0.0).to_string()],
        vec!["heldout_states".into(), votes.n_states.to_string()],
        vec!["heldout_votes_before".into(), votes.votes_before.to_string()],
        vec!["heldout_votes_after".into(), votes.votes_after.to_string()],
        vec!["heldout_mean_q_before".into(), votes.q_before.to_string()],
        vec!["heldout_mean_q_after".into(), votes.q_after.to_string()],
    ];
    write_table(&run.report("sft_summary.csv"), &["quantity", "value"], &rows)?;
    Ok(SftOutcome { policy: tuned, n_pairs: pairs.len(), n_transitions: train.n_transitions(), votes })
}

/// Every available agent on the budget sweep: base, GAS per trained
/// preference, the fine-tuned policy if present, and oracle pacing.
pub fn eval(s: &Settings, run: &RunDir) -> Result<ReportSet> {
    run.write_snapshot(s)?;
    let policy = run.load_policy()?;
    let mut ensembles = Vec::new();
    for kind in &s.critic_preferences {
        ensembles.push((*kind, run.load_ensemble(*kind, s)?));
    }
    let sft = if run.sft_policy().exists() { Some(load_policy(&run.sft_policy())?) } else { None };
    let spec = experiment_spec(s)?;
    let mut agents = vec![NamedAgent::new("base", PolicyAgent::new(&policy))];
    for (kind, ens) in &ensembles {
        let refiner = GasRefiner::new(ens, s.search, policy.action_bounds);
        agents.push(NamedAgent::new(format!("gas_{}", kind.as_str()), PolicyAgent::with_refiner(&policy, refiner)));
    }
    if let Some(p) = &sft {
        agents.push(NamedAgent::new("sft", PolicyAgent::new(p)));
    }
    let oracle = ScriptedAgent::new(ScriptedPolicy::oracle_pacing(&s.env), &s.env, spec.reference_budget, 0);
    agents.push(NamedAgent::new("oracle_pacing", oracle));
    let report = run_experiment(&mut agents, &s.env, &spec)?;
    write_report_set(run, "eval", report, "base")
}

pub fn ablate(s: &Settings, run: &RunDir) -> Result<Vec<AblationRow>> {
    run.write_snapshot(s)?;
    for v in &s.ablate_grid {
        let ok = match s.ablate_kind {
            AblationKind::SearchBudget => *v >= 1.0 && v.fract() == 0.0,
            AblationKind::NCritics => *v >= 1.0 && v.fract() == 0.0 && *v as usize <= s.critic_members,
            AblationKind::SearchRange => (0.0..1.0).contains(v),
        };
        if !ok {
            return Err(LabError::Config(format!("ablate.grid value {v} is invalid for {}", s.ablate_kind.as_str())));
        }
    }
    let policy = run.load_policy()?;
    let ens = run.load_ensemble(primary_preference(s), s)?;
    let setup = AblationSetup { policy: &policy, ensemble: &ens, search: s.search, config: s.env.clone(), spec: experiment_spec(s)? };
    let (rows, report) = ablation_suite(s.ablate_kind, &s.ablate_grid, &setup)?;
    let kind = s.ablate_kind.as_str();
    write_ablation(&rows, &run.report(&format!("ablate_{kind}.csv")))?;
    write_episodes(&report, &run.report(&format!("ablate_{kind}_episodes.csv")))?;
    Ok(rows)
}
