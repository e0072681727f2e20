//! Finite differences against the tape on the real policy and QT layouts.

mod common;

use gas_core::approx::{finite_difference_check, AttentionScope, SeqNet};
use gas_core::data::Window;
use gas_core::encode::{ArchConfig, Encoder};

fn arch() -> ArchConfig {
    ArchConfig { n_layers: 2, n_heads: 2, hidden: 8, context: 4, max_timestep: 8 }
}

#[test]
fn policy_and_qt_gradients_match_finite_differences() {
    let ds = common::synthetic(2, 6, 1, |s, _| 3.0 * s.0[0]);
    let enc = Encoder::fit(&ds, 1.0);
    let w = Window::from_trajectory(&ds, 0, 2, 4);
    let cases = [
        (arch().policy_spec(), enc.policy_window(&w)),
        (arch().critic_spec("action", AttentionScope::Causal), enc.critic_window(&w)),
        (arch().critic_spec("state", AttentionScope::Causal), enc.critic_window(&w)),
    ];
    for seed in 0..3 {
        for (spec, input) in &cases {
            let (net, mut params) = SeqNet::init(spec.clone(), seed).unwrap();
            for v in params.tensor_mut("head.weight").unwrap() {
                *v *= 100.0;
            }
            let r = finite_difference_check(&net, &params, input, 1e-5, 200, seed).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed} readout {}: {r:?}", spec.readout);
            assert!(r.checked > 200);
        }
    }
}
