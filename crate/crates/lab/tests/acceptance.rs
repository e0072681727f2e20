//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p gas-lab --test acceptance`. The debug
//! profile works but the training-heavy criteria take far longer.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gas_core::approx::LrSchedule;
use gas_core::critic::{qt_forward, train_member, CriticNets, IqlConfig, PreferenceSpec};
use gas_core::data::{Dataset, Trajectory, Transition, Window};
use gas_core::encode::{ArchConfig, Encoder};
use gas_core::eval::{run_experiment, Metric, MetricReport, NamedAgent};
use gas_core::policy::{train_policy_bc, PolicyAgent, PolicyTrainConfig, SequenceContext};
use gas_core::search::{gas_infer_step, GasRefiner, SearchConfig, SyntheticQ};
use gas_core::sim::{RewardComponents, StateVector, STATE_DIM};
use gas_lab::kv::KvFile;
use gas_lab::pipeline::{self, RunDir};
use gas_lab::report::p_value;
use gas_lab::settings::Settings;
use gas_lab::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn voting() -> Outcome {
    let r = verify::voting_math(1_000_000);
    outcome(r.passed, r.detail)
}

fn expectiles() -> Outcome {
    let r = verify::expectile_identities();
    outcome(r.passed, r.detail)
}

fn gradients() -> Outcome {
    let r = verify::gradients(&ArchConfig::default(), 3, 24, 1e-4);
    outcome(r.passed, r.detail)
}

const CHAIN: usize = 5;
const CHAIN_GAMMA: f64 = 0.9;
const CHAIN_TAU: f64 = 0.7;

fn chain_reward(s: usize, a: usize) -> f64 {
    0.5 + a as f64 * (0.2 + 0.1 * s as f64)
}

/// Value iteration with V(s) the expectile of Q(s, .) under uniform binary
/// actions: tau * q_hi + (1 - tau) * q_lo.
fn chain_fixed_point() -> [[f64; 2]; CHAIN] {
    let mut q = [[0.0f64; 2]; CHAIN];
    for _ in 0..200 {
        let mut v = [0.0; CHAIN + 1];
        for s in 0..CHAIN {
            let (lo, hi) = (q[s][0].min(q[s][1]), q[s][0].max(q[s][1]));
            v[s] = CHAIN_TAU * hi + (1.0 - CHAIN_TAU) * lo;
        }
        for s in 0..CHAIN {
            for a in 0..2 {
                q[s][a] = chain_reward(s, a) + CHAIN_GAMMA * v[s + 1];
            }
        }
    }
    q
}

fn chain_dataset(n_episodes: u64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..n_episodes)
        .map(|p| {
            let actions: Vec<usize> = (0..CHAIN).map(|_| rng.gen_range(0..2)).collect();
            let transitions = (0..CHAIN)
                .map(|s| {
                    let mut st = StateVector::default();
                    st.0[0] = 1.0 - s as f64 / CHAIN as f64;
                    st.0[2] = s as f64;
                    Transition {
                        period_id: p,
                        advertiser_id: 0,
                        t: s,
                        state: st,
                        action: actions[s] as f64,
                        reward: RewardComponents::zeros(1),
                        done: s + 1 == CHAIN,
                    }
                })
                .collect();
            let mut traj = Trajectory::new(transitions).unwrap();
            traj.set_rewards((0..CHAIN).map(|s| chain_reward(s, actions[s])).collect(), CHAIN_GAMMA);
            traj
        })
        .collect();
    Dataset { trajectories, constraints: vec![1.0], seed }
}

fn chain() -> Outcome {
    let ds = chain_dataset(512, 3);
    let arch = ArchConfig { n_layers: 1, n_heads: 2, hidden: 16, context: CHAIN + 1, max_timestep: CHAIN };
    let cfg = IqlConfig {
        gamma: CHAIN_GAMMA,
        expectile: CHAIN_TAU,
        lr: 1e-3,
        weight_decay: 0.0,
        batch: 32,
        steps: 4000,
        lr_schedule: LrSchedule::Cosine,
        seq_len: CHAIN,
        tau_soft: 0.05,
        reward_scale: Some(1.0),
        ..IqlConfig::default()
    };
    let nets = CriticNets::new(&arch, cfg.v_scope).unwrap();
    let enc = Encoder::fit(&ds, 1.0);
    let (member, _) = train_member(&nets, &enc, &ds, &cfg, 1.0, 7, 8).unwrap();
    let q_star = chain_fixed_point();
    let mut worst: f64 = 0.0;
    for traj in 0..16 {
        for s in 0..CHAIN {
            let w = Window::from_trajectory(&ds, traj, s, CHAIN);
            let ctx = SequenceContext::from_window(&w, CHAIN - 1, 1.0);
            for a in 0..2 {
                let q = qt_forward(&nets, &enc, &member, &ctx, a as f64).unwrap();
                worst = worst.max((q - q_star[s][a]).abs() / q_star[s][a].abs());
            }
        }
    }
    outcome(worst < 0.05, format!("worst relative error {worst:.4} against the tabular fixed point"))
}

fn auctions() -> Outcome {
    let r = verify::auctions(10_000, 1_000);
    outcome(r.passed, r.detail)
}

const PEAK: f64 = 1.05;

fn logged(s: &StateVector) -> f64 {
    1.0 + 4.0 * s.0[0]
}

fn synthetic(n_traj: usize, len: usize, seed: u64) -> Dataset {
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
                    Transition { period_id: p as u64, advertiser_id: 0, t, action: logged(&s), state: s, reward, done: t + 1 == len }
                })
                .collect();
            Trajectory::new(transitions).unwrap()
        })
        .collect();
    Dataset { trajectories, constraints: vec![1.0], seed }
}

/// Oracle Q concave in the action with its peak 5% above the base policy's
/// choice. A uniform proposal lands strictly closer to the peak exactly when
/// its factor exceeds 1, so with N proposals the search strictly improves on
/// a step with probability 1 - 0.5^(N-1) and never does worse.
fn synthetic_search() -> Outcome {
    let ds = synthetic(40, 8, 1);
    let arch = ArchConfig { n_layers: 1, n_heads: 2, hidden: 16, context: 4, max_timestep: 8 };
    let cfg = PolicyTrainConfig { lr: 3e-3, batch: 32, steps: 200, seq_len: 4, rtg_scale: 10.0, eval_every: 0, ..PolicyTrainConfig::default() };
    let (policy, _) = train_policy_bc(&ds, &PreferenceSpec::value_only(), &arch, &cfg, (0.0, 100.0), 1).unwrap();
    let p = policy.clone();
    let oracle = SyntheticQ::new(3, move |c| PEAK * p.act(c).unwrap());
    let held = synthetic(300, 8, 2);
    let mut ctxs = Vec::new();
    for i in 0..held.trajectories.len() {
        for t in 0..held.trajectories[i].len() {
            ctxs.push(SequenceContext::from_window(&Window::from_trajectory(&held, i, t, 4), 3, 10.0));
        }
    }
    let mut ok = true;
    let mut parts = Vec::new();
    let mut means = Vec::new();
    for n in [1, 3, 5] {
        let scfg = SearchConfig { n_proposals: n, seed: 7, ..SearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut not_worse, mut strictly, mut total) = (0usize, 0usize, 0.0);
        for c in &ctxs {
            let base = policy.act(c).unwrap();
            let out = gas_infer_step(&policy, &oracle, c, &scfg, &mut rng).unwrap();
            let (qg, qb) = (oracle.value(c, out.action), oracle.value(c, base));
            not_worse += usize::from(qg >= qb);
            strictly += usize::from(qg > qb);
            total += qg;
        }
        let steps = ctxs.len() as f64;
        let expected = 1.0 - 0.5f64.powi(n as i32 - 1);
        let rate = strictly as f64 / steps;
        let never_worse = not_worse as f64 / steps;
        ok &= never_worse >= 0.95 && (rate - expected).abs() < 0.02;
        means.push(total / steps);
        parts.push(format!("N={n}: not worse {never_worse:.4}, strictly better {rate:.4} (analytic {expected:.4}), mean Q {:.5}", total / steps));
    }
    ok &= means[0] <= means[1] && means[1] <= means[2];
    outcome(ok, parts.join("; "))
}

/// Desk-scale run shared by the paired-protocol criteria.
const DESK_CONFIG: &str = "
seed = 1
env.impressions_per_step = 200
env.period_length = 24
env.value_dist.beta_a = 2
env.value_dist.beta_b = 8
env.opponent_mix.constant = 3
env.opponent_mix.pacing = 2
env.budget = 30000
env.cpa_constraint = 100
env.seed = 1
env.lambda_max = 500
env.action_mode = absolute
data.n_periods = 150
data.budget_fracs = 0.5,1,1.5
policy.n_layers = 2
policy.n_heads = 2
policy.hidden = 32
policy.context = 10
policy.seq_len = 10
policy.lr = 0.001
policy.batch = 64
policy.steps = 300
policy.eval_every = 100
critic.n_layers = 1
critic.n_heads = 2
critic.hidden = 32
critic.context = 2
critic.seq_len = 2
critic.lr = 0.001
critic.lr_schedule = cosine
critic.batch = 128
critic.steps = 3000
critic.members = 3
search.n_proposals = 5
search.range = 0.1
search.m_critics = 3
sft.lr = 0.00001
sft.batch = 64
sft.steps = 500
eval.n_periods = 100
eval.budget_fracs = 0.5,1,1.5
eval.reference_budget = env
";

struct DeskRun {
    report: MetricReport,
    votes: pipeline::VoteComparison,
    train_seconds: f64,
    eval_seconds: f64,
}

fn desk_run(root: &Path) -> DeskRun {
    let mut s = Settings::default();
    s.apply_file(&KvFile::parse(DESK_CONFIG, "desk").unwrap(), "desk").unwrap();
    let s = s.finish().unwrap();
    let run = RunDir::create(root).unwrap();
    let t0 = Instant::now();
    pipeline::gen_data(&s, &run).unwrap();
    pipeline::train_policy(&s, &run).unwrap();
    pipeline::train_critics(&s, &run).unwrap();
    let sft = pipeline::sft(&s, &run).unwrap();
    let train_seconds = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let policy = run.load_policy().unwrap();
    let ens = run.load_ensemble(s.critic_preferences[0], &s).unwrap();
    let singles: Vec<_> = (0..ens.len()).map(|k| ens.subset(&[k]).unwrap()).collect();
    let bounds = policy.action_bounds;
    let mut agents = vec![
        NamedAgent::new("base", PolicyAgent::new(&policy)),
        NamedAgent::new("gas", PolicyAgent::with_refiner(&policy, GasRefiner::new(&ens, s.search, bounds))),
        NamedAgent::new("sft", PolicyAgent::new(&sft.policy)),
    ];
    for (k, single) in singles.iter().enumerate() {
        let search = SearchConfig { m_critics: 1, ..s.search };
        agents.push(NamedAgent::new(format!("gas_m1_{k}"), PolicyAgent::with_refiner(&policy, GasRefiner::new(single, search, bounds))));
    }
    let report = run_experiment(&mut agents, &s.env, &pipeline::experiment_spec(&s).unwrap()).unwrap();
    DeskRun { report, votes: sft.votes, train_seconds, eval_seconds: t0.elapsed().as_secs_f64() }
}

fn mean_score(report: &MetricReport, agent: &str) -> f64 {
    let xs: Vec<f64> = report.rows.iter().filter(|r| r.agent == agent && !r.failed).map(|r| r.score).collect();
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn gas_beats_base(run: &DeskRun) -> Outcome {
    let st = run.report.paired("gas", "base", Metric::Score);
    let p = p_value(&st);
    let (g, b) = (mean_score(&run.report, "gas"), mean_score(&run.report, "base"));
    outcome(
        st.n >= 50 && g >= b && p < 0.05,
        format!(
            "{} paired episodes, score gas {g:.3} base {b:.3}, diff {:.3} t={:.2} p={p:.2e}; training {:.0}s, evaluation {:.0}s",
            st.n, st.mean, st.t, run.train_seconds, run.eval_seconds
        ),
    )
}

/// Three critics against one, where "one" is the average over running each
/// member alone on the same seeds rather than an arbitrary single member.
fn ensemble_beats_single(run: &DeskRun) -> Outcome {
    let three = mean_score(&run.report, "gas");
    let singles: Vec<f64> = (0..3).map(|k| mean_score(&run.report, &format!("gas_m1_{k}"))).collect();
    let one = singles.iter().sum::<f64>() / singles.len() as f64;
    let per: Vec<String> = singles.iter().map(|v| format!("{v:.3}")).collect();
    outcome(three >= one, format!("score M=3 {three:.3}, M=1 {one:.3} (members {})", per.join(", ")))
}

fn sft_holds_up(run: &DeskRun) -> Outcome {
    let v = &run.votes;
    let (s, g) = (mean_score(&run.report, "sft"), mean_score(&run.report, "gas"));
    let ratio = s / g;
    outcome(
        v.votes_after >= v.votes_before && ratio >= 0.95,
        format!(
            "held-out votes {:.3} -> {:.3} on {} states (mean Q {:.4} -> {:.4}); score sft {s:.3} gas {g:.3} ratio {ratio:.3}",
            v.votes_before, v.votes_after, v.n_states, v.q_before, v.q_after
        ),
    )
}

const TINY_CONFIG: &str = "
env.impressions_per_step = 50
env.period_length = 8
env.value_dist.beta_a = 2
env.value_dist.beta_b = 5
env.opponent_mix.constant = 3
env.opponent_mix.pacing = 3
env.budget = 5000
env.cpa_constraint = 8
env.seed = 3
env.lambda_max = 100
env.action_mode = absolute
data.n_periods = 6
policy.n_layers = 1
policy.hidden = 16
policy.context = 4
policy.seq_len = 4
policy.steps = 20
policy.batch = 16
critic.n_layers = 1
critic.hidden = 16
critic.context = 4
critic.seq_len = 4
critic.steps = 20
critic.batch = 16
sft.steps = 10
eval.n_periods = 2
eval.budget_fracs = 0.5,1
ablate.grid = 1,3
";

const SUBCOMMANDS: [&str; 7] = ["gen-data", "train-policy", "train-critics", "infer", "sft", "eval", "ablate"];

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_all(root: &Path, config: &Path) -> Result<(), String> {
    for cmd in SUBCOMMANDS {
        let out = Command::new(env!("CARGO_BIN_EXE_gas"))
            .args([cmd, "--run-dir"])
            .arg(root)
            .arg("--config")
            .arg(config)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

/// The second run is configured from the first run's snapshot.
fn reruns_identical(dir: &Path) -> Outcome {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    if let Err(e) = run_all(&a, &cfg) {
        return outcome(false, e);
    }
    let snapshot = dir.join("snapshot.cfg");
    std::fs::copy(a.join("config.snapshot"), &snapshot).unwrap();
    if let Err(e) = run_all(&b, &snapshot) {
        return outcome(false, e);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let covered = ["datasets/", "checkpoints/", "reports/"].iter().all(|p| ta.keys().any(|k| k.starts_with(p)));
    outcome(
        covered && differing.is_empty() && ta.len() == tb.len(),
        format!("{} files over {} subcommands, {} differ", ta.len(), SUBCOMMANDS.len(), differing.len()),
    )
}

/// `shared` is time already spent on setup the criterion depends on.
fn report(id: u32, name: &str, limit_seconds: f64, shared: f64, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    let secs = shared + t0.elapsed().as_secs_f64();
    let passed = o.passed && secs < limit_seconds;
    let timing = if secs < limit_seconds { format!("{secs:.1}s") } else { format!("{secs:.1}s, over the {limit_seconds:.0}s limit") };
    println!("{} criterion {id:>2} {name}: {} [{timing}]", if passed { "PASS" } else { "FAIL" }, o.detail);
    passed
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = true;
    all &= report(1, "majority voting", 5.0, 0.0, voting);
    all &= report(2, "expectile identities", 1.0, 0.0, expectiles);
    all &= report(3, "gradient check", 120.0, 0.0, gradients);
    all &= report(4, "chain fixed point", 300.0, 0.0, chain);
    all &= report(5, "auctions and budget", 60.0, 0.0, auctions);
    all &= report(6, "synthetic search", 120.0, 0.0, synthetic_search);

    let t0 = Instant::now();
    let desk = desk_run(&dir.path().join("desk"));
    let shared = t0.elapsed().as_secs_f64();
    all &= report(7, "gas vs base", 3600.0, shared, || gas_beats_base(&desk));
    all &= report(8, "three critics vs one", 3600.0, shared, || ensemble_beats_single(&desk));
    all &= report(9, "sft", 1800.0, shared, || sft_holds_up(&desk));
    all &= report(10, "byte-identical reruns", 600.0, 0.0, || reruns_identical(dir.path()));
    if !all {
        std::process::exit(1);
    }
}
