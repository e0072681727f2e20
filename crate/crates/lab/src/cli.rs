//! Argument parsing and dispatch for the `gas` binary.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{LabError, Result};
use crate::kv::KvFile;
use crate::pipeline::{self, RunDir};
use crate::report::PairedRow;
use crate::settings::{env_from_kv, Settings};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "gas", version, about = "Generative auto-bidding with post-training search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect logged behavior trajectories into datasets/.
    GenData(Common),
    /// Behavior-clone the return-conditioned policy.
    TrainPolicy(Common),
    /// Train one critic ensemble per configured preference.
    TrainCritics(Common),
    /// Compare the base policy with search at inference time.
    Infer(Common),
    /// Refine logged actions by search and fine-tune the policy on them.
    Sft(Common),
    /// Budget sweep over every available agent.
    Eval(Common),
    /// Sweep one search setting.
    Ablate(AblateArgs),
    /// Run the analytic and brute-force checks.
    Verify,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run directory holding config.snapshot, checkpoints/, datasets/, reports/.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Settings file (`key = value`), e.g. a previous config.snapshot.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment file; every environment key is required.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Override one setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub n_proposals: Option<String>,
    /// Perturbation half-width as a fraction of the base action.
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub m_critics: Option<String>,
    /// prefer_base or lowest_index.
    #[arg(long)]
    pub tie_break: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// search_budget, n_critics or search_range.
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated parameter values.
    #[arg(long)]
    pub grid: Option<String>,
}

impl Common {
    /// Defaults, then --config, --env, --set, then dedicated flags.
    pub fn settings(&self, extra: &[(&str, &Option<String>)]) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(&KvFile::read(path)?, &path.display().to_string())?;
        }
        if let Some(path) = &self.env {
            let origin = path.display().to_string();
            s.env = env_from_kv(&KvFile::read(path)?, &origin)?;
        }
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| LabError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            s.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("search.n_proposals", &self.n_proposals),
            ("search.range", &self.range),
            ("search.m_critics", &self.m_critics),
            ("search.tie_break", &self.tie_break),
            ("seed", &self.seed),
        ];
        for (key, value) in flags.iter().chain(extra) {
            if let Some(v) = value {
                s.set(key, v).map_err(|e| match e {
                    LabError::Config(m) => LabError::Usage(m),
                    other => other,
                })?;
            }
        }
        s.finish()
    }
}

fn print_paired(out: &mut impl Write, rows: &[PairedRow]) {
    for r in rows.iter().filter(|r| r.metric == gas_core::eval::Metric::Score) {
        let _ = writeln!(
            out,
            "{} vs {} score: n={} mean_diff={:.4} t={:.3} p={:.4}",
            r.agent, r.baseline, r.stats.n, r.stats.mean, r.stats.t, r.p_value
        );
    }
}

/// Execute one parsed command, writing human-readable progress to `out`.
pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    let open = |c: &Common| RunDir::create(&c.run_dir);
    match cli.command {
        Command::GenData(c) => {
            let s = c.settings(&[])?;
            let m = pipeline::gen_data(&s, &open(&c)?)?;
            let _ = writeln!(out, "dataset: {} trajectories, {} transitions", m.n_trajectories, m.n_transitions);
        }
        Command::TrainPolicy(c) => {
            let s = c.settings(&[])?;
            let p = pipeline::train_policy(&s, &open(&c)?)?;
            let _ = writeln!(out, "policy: {} parameters, rtg target {:.4}", p.params.len(), p.rtg_target);
        }
        Command::TrainCritics(c) => {
            let s = c.settings(&[])?;
            for ens in pipeline::train_critics(&s, &open(&c)?)? {
                let _ = writeln!(out, "critics {}: {} members", ens.preference.kind.as_str(), ens.len());
            }
        }
        Command::Infer(c) => {
            let s = c.settings(&[])?;
            let r = pipeline::infer(&s, &open(&c)?)?;
            print_paired(out, &r.paired);
        }
        Command::Sft(c) => {
            let s = c.settings(&[])?;
            let o = pipeline::sft(&s, &open(&c)?)?;
            let _ = writeln!(
                out,
                "sft: {} pairs from {} transitions; held-out votes {:.4} -> {:.4}",
                o.n_pairs, o.n_transitions, o.votes.votes_before, o.votes.votes_after
            );
        }
        Command::Eval(c) => {
            let s = c.settings(&[])?;
            let r = pipeline::eval(&s, &open(&c)?)?;
            print_paired(out, &r.paired);
        }
        Command::Ablate(a) => {
            let s = a.common.settings(&[("ablate.kind", &a.kind), ("ablate.grid", &a.grid)])?;
            for r in pipeline::ablate(&s, &open(&a.common)?)? {
                let _ = writeln!(out, "{}={} score={:.4} value={:.4} er={:.4}", r.kind.as_str(), r.param, r.mean_score, r.mean_value, r.er);
            }
        }
        Command::Verify => {
            let results = verify::run_all();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                let _ = writeln!(out, "{} {} ({}) [{:.2}s]", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail, r.seconds);
            }
            if failed > 0 {
                return Err(LabError::Verify(format!("{failed} of {} checks failed", results.len())));
            }
        }
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code. Errors go to `err`
/// as one JSON line.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(out, "{e}");
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let msg = first.trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "{}", LabError::Usage(msg).to_line());
            return 2;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_line());
            e.exit_code()
        }
    }
}
