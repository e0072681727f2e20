#![allow(dead_code)]

use gas_core::data::{Dataset, Trajectory, Transition};
use gas_core::sim::{RewardComponents, StateVector, STATE_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random states in `[0, 1)`, logged action `action(state)`, random value reward.
pub fn synthetic(n_traj: usize, len: usize, seed: u64, action: impl Fn(&StateVector, &mut ChaCha8Rng) -> f64) -> Dataset {
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
                    let a = action(&s, &mut rng);
                    Transition { period_id: p as u64, advertiser_id: 0, t, action: a, state: s, reward, done: t + 1 == len }
                })
                .collect();
            Trajectory::new(transitions).unwrap()
        })
        .collect();
    Dataset { trajectories, constraints: vec![1.0], seed }
}
