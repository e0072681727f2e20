use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// The base action wins any tie it is part of, then the lowest index.
    PreferBase,
    LowestIndex,
}

impl TieBreak {
    pub fn as_str(&self) -> &'static str {
        match self {
            TieBreak::PreferBase => "prefer_base",
            TieBreak::LowestIndex => "lowest_index",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prefer_base" => Some(TieBreak::PreferBase),
            "lowest_index" => Some(TieBreak::LowestIndex),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteTally {
    /// `M x N` min-max normalized votes.
    pub per_critic_votes: Vec<Vec<f64>>,
    pub total_votes: Vec<f64>,
    pub selected_index: usize,
}

/// Min-max normalize one critic's Q values; all-equal values give all zeros.
pub fn qvote_single(q: &[f64]) -> Vec<f64> {
    let min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.0; q.len()];
    }
    q.iter().map(|x| (x - min) / span).collect()
}

/// Sum the normalized votes over critics and pick the argmax.
pub fn qvote_ensemble(per_critic_q: &[Vec<f64>], tie_break: TieBreak, base_index: usize) -> Result<VoteTally> {
    contract!(!per_critic_q.is_empty(), "no critics");
    let n = per_critic_q[0].len();
    contract!(n >= 1, "no proposals");
    contract!(per_critic_q.iter().all(|r| r.len() == n), "ragged Q matrix");
    contract!(per_critic_q.iter().flatten().all(|q| q.is_finite()), "non-finite Q value");
    contract!(base_index < n, "base index {base_index} out of {n}");
    let per_critic_votes: Vec<Vec<f64>> = per_critic_q.iter().map(|q| qvote_single(q)).collect();
    let mut total_votes = vec![0.0; n];
    for votes in &per_critic_votes {
        for (t, v) in total_votes.iter_mut().zip(votes) {
            *t += v;
        }
    }
    let best = total_votes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let selected_index = match tie_break {
        TieBreak::PreferBase if total_votes[base_index] == best => base_index,
        _ => total_votes.iter().position(|v| *v == best).unwrap_or(base_index),
    };
    Ok(VoteTally { per_critic_votes, total_votes, selected_index })
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that a strict majority of `m` independent critics, each
/// backing an action with probability `p`, backs it.
pub fn majority_probability(p: f64, m: usize) -> f64 {
    (m / 2 + 1..=m).map(|l| binomial(m, l) * math::powf(p, l as f64) * math::powf(1.0 - p, (m - l) as f64)).sum()
}

/// Win rate of each action: its majority probability over the sum of the
/// others'. An action whose rivals all have probability 0 gets `f64::MAX`.
pub fn majority_winrate(p: &[f64], m: usize) -> Result<Vec<f64>> {
    contract!(!p.is_empty(), "empty probability vector");
    contract!(p.iter().all(|x| (0.0..=1.0).contains(x)), "probabilities must lie in [0,1]");
    let total: f64 = p.iter().sum();
    contract!((total - 1.0).abs() <= 1e-9, "probabilities sum to {total}, not 1");
    contract!(m % 2 == 1, "number of critics must be odd, got {m}");
    let maj: Vec<f64> = p.iter().map(|x| majority_probability(*x, m)).collect();
    let sum: f64 = maj.iter().sum();
    Ok(maj
        .iter()
        .map(|x| {
            let rest = sum - x;
            if rest > 0.0 {
                x / rest
            } else {
                f64::MAX
            }
        })
        .collect())
}
