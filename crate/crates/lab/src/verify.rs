//! Analytic and brute-force checks run by `gas verify`.

use std::time::Instant;

use gas_core::approx::{finite_difference_check, AttentionScope, SeqInput, SeqNet};
use gas_core::critic::expectile_loss;
use gas_core::data::{collect_dataset, compute_rtg, Window};
use gas_core::encode::{ArchConfig, Encoder};
use gas_core::search::majority_winrate;
use gas_core::sim::{run_auction, AuctionEnv, EnvConfig, ImpressionOpportunity, OpponentMix, ScriptedPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let t0 = Instant::now();
    let (passed, detail) = f();
    CheckResult { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

/// Fraction of trials in which a strict majority of `m` critics, each
/// backing action `i` with probability `p[i]`, backs each action.
pub fn simulate_majorities(p: &[f64], m: usize, trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; p.len()];
    let mut counts = vec![0usize; p.len()];
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..m {
            let mut u: f64 = rng.gen();
            let mut pick = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                if u < *pi {
                    pick = i;
                    break;
                }
                u -= pi;
            }
            counts[pick] += 1;
        }
        if let Some(i) = counts.iter().position(|c| 2 * c > m) {
            hits[i] += 1;
        }
    }
    hits.iter().map(|h| *h as f64 / trials as f64).collect()
}

fn winrate_of_first(maj: &[f64]) -> f64 {
    maj[0] / maj[1..].iter().sum::<f64>()
}

pub fn voting_math(trials: usize) -> CheckResult {
    timed("voting_math", || {
        let p = [0.4, 0.3, 0.3];
        let three = majority_winrate(&p, 3).expect("valid input")[0];
        let single = majority_winrate(&p, 1).expect("valid input")[0];
        let mut ok = (three - 0.8148).abs() <= 1e-3 && (single - 0.6667).abs() <= 1e-3;
        let mut detail = format!("M=3 {three:.4} M=1 {single:.4}");
        for (m, seed) in [(3, 11), (5, 12)] {
            let analytic = majority_winrate(&p, m).expect("valid input")[0];
            let mc = winrate_of_first(&simulate_majorities(&p, m, trials, seed));
            ok &= (mc - analytic).abs() < 0.005;
            detail.push_str(&format!("; M={m} monte carlo {mc:.4} vs {analytic:.4}"));
        }
        (ok, detail)
    })
}

pub fn expectile_identities() -> CheckResult {
    timed("expectile_identities", || {
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let u = -5.0 + 10.0 * i as f64 / 99.0;
            worst = worst.max((expectile_loss(u, 0.5) - 0.5 * u * u).abs());
            for j in 0..100 {
                let tau = (j as f64 + 0.5) / 100.0;
                worst = worst.max((expectile_loss(u, tau) - expectile_loss(-u, 1.0 - tau)).abs());
                worst = worst.max(expectile_loss(0.0, tau).abs());
            }
        }
        (worst <= 1e-12, format!("10^4 grid points, max deviation {worst:e}"))
    })
}

/// Finite differences against the tape on the policy, Q and V networks of
/// `arch`, using encoded windows of logged simulator data. The best `eps`
/// shrinks with network size: rounding dominates on wide nets, truncation on
/// tiny ones.
pub fn gradients(arch: &ArchConfig, seeds: u64, per_tensor: usize, eps: f64) -> CheckResult {
    timed("gradients", || {
        let env = EnvConfig { impressions_per_step: 50, period_length: arch.max_timestep, budget: 5000.0, ..EnvConfig::default() };
        let ds = collect_dataset(&ScriptedPolicy::behavior_mix(&env)[..1], &env, 1, 3).expect("collection succeeds");
        let enc = Encoder::fit(&ds, 2000.0);
        let end = (arch.context + 2).min(ds.trajectories[0].len()) - 1;
        let w = Window::from_trajectory(&ds, 0, end, arch.context);
        let cases: [(&str, _, SeqInput); 3] = [
            ("policy", arch.policy_spec(), enc.policy_window(&w)),
            ("q", arch.critic_spec("action", AttentionScope::Causal), enc.critic_window(&w)),
            ("v", arch.critic_spec("state", AttentionScope::Causal), enc.critic_window(&w)),
        ];
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for seed in 0..seeds {
            for (_, spec, input) in &cases {
                let (net, mut params) = SeqNet::init(spec.clone(), seed).expect("valid spec");
                // The small-gain output head would otherwise leave every
                // inner gradient below the comparison floor.
                for v in params.tensor_mut("head.weight").expect("head exists") {
                    *v *= 100.0;
                }
                let r = finite_difference_check(&net, &params, input, eps, per_tensor, seed).expect("check runs");
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
            }
        }
        (worst < 1e-4, format!("{seeds} seeds, {checked} coordinates, max relative error {worst:.2e}"))
    })
}

fn random_impression(rng: &mut ChaCha8Rng) -> ImpressionOpportunity {
    let n = rng.gen_range(1..8);
    ImpressionOpportunity {
        index: 0,
        value: rng.gen_range(0.0..1.0),
        competitor_bids: (0..n).map(|_| rng.gen_range(0.0..10.0)).collect(),
        perf_indicators: Vec::new(),
        constraint_costs: Vec::new(),
        conversion_draw: rng.gen_range(0.0..1.0),
    }
}

pub fn auctions(n_auctions: usize, n_episodes: usize) -> CheckResult {
    timed("auctions", || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut mismatches = 0;
        for _ in 0..n_auctions {
            let imp = random_impression(&mut rng);
            let bid = rng.gen_range(0.0..10.0);
            let budget = rng.gen_range(0.0..10.0);
            let out = run_auction(bid, &imp, budget);
            let mut price: f64 = 0.0;
            let mut beaten = true;
            for c in &imp.competitor_bids {
                price = price.max(*c);
                beaten &= bid > *c;
            }
            let won = beaten && price <= budget;
            let conversion = won && imp.conversion_draw < imp.value;
            if out.won != won || out.cost != if won { price } else { 0.0 } || out.conversion != conversion {
                mismatches += 1;
            }
        }
        let mut overspent = 0;
        for e in 0..n_episodes {
            let env = EnvConfig {
                impressions_per_step: rng.gen_range(1..40),
                period_length: rng.gen_range(1..8),
                budget: rng.gen_range(1.0..200.0),
                opponent_mix: OpponentMix { constant: rng.gen_range(0..3), pacing: rng.gen_range(1..3) },
                ..EnvConfig::default()
            };
            let mut sim = AuctionEnv::reset(&env.profile(), &env, e as u64).expect("valid config");
            loop {
                let out = sim.step(rng.gen_range(0.0..env.lambda_max)).expect("step succeeds");
                if sim.state().budget_spent > env.budget {
                    overspent += 1;
                    break;
                }
                if out.done {
                    break;
                }
            }
        }
        (
            mismatches == 0 && overspent == 0,
            format!("{n_auctions} auctions, {mismatches} mismatches; {n_episodes} episodes, {overspent} over budget"),
        )
    })
}

pub fn returns_to_go() -> CheckResult {
    timed("returns_to_go", || {
        let a = compute_rtg(&[1.0, 2.0, 3.0], 1.0);
        let b = compute_rtg(&[1.0, 2.0, 3.0], 0.99);
        let ok = a == [6.0, 5.0, 3.0] && (b[0] - 5.9203).abs() < 1e-12;
        (ok, format!("{a:?}, rtg[0]={}", b[0]))
    })
}

/// The full suite with acceptance-sized settings.
pub fn run_all() -> Vec<CheckResult> {
    let desk = ArchConfig::default();
    vec![voting_math(1_000_000), expectile_identities(), gradients(&desk, 3, 24, 1e-4), auctions(10_000, 1_000), returns_to_go()]
}
