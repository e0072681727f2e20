use serde::{Deserialize, Serialize};

use crate::math;
use crate::sim::RewardComponents;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreferenceKind {
    /// `r = o v`: value only, budget is the sole constraint.
    ValueOnly,
    /// `r = o v * mean_j penalty_j`.
    ScoreProduct,
    /// `r = o v + w * mean_j penalty_j`.
    WeightedSum,
}

impl PreferenceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PreferenceKind::ValueOnly => "value_only",
            PreferenceKind::ScoreProduct => "score_product",
            PreferenceKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "value_only" => Some(PreferenceKind::ValueOnly),
            "score_product" => Some(PreferenceKind::ScoreProduct),
            "weighted_sum" => Some(PreferenceKind::WeightedSum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    pub kind: PreferenceKind,
    pub beta: f64,
    pub w: f64,
}

impl PreferenceSpec {
    pub fn value_only() -> Self {
        PreferenceSpec { kind: PreferenceKind::ValueOnly, beta: 2.0, w: 0.0 }
    }

    pub fn score_product() -> Self {
        PreferenceSpec { kind: PreferenceKind::ScoreProduct, beta: 2.0, w: 0.0 }
    }

    pub fn weighted_sum(w: f64) -> Self {
        PreferenceSpec { kind: PreferenceKind::WeightedSum, beta: 2.0, w }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.beta > 1.0) {
            return Err(crate::Error::Config(alloc::format!("beta must be > 1, got {}", self.beta)));
        }
        if !(self.w >= 0.0) {
            return Err(crate::Error::Config(alloc::format!("w must be >= 0, got {}", self.w)));
        }
        Ok(())
    }
}

/// `min{(C / x)^beta, 1}` for the realized ratio `x = cost / perf`.
///
/// Zero wins or zero performance carry no evidence of a violation and give 1.
pub fn constraint_penalty(cost: f64, perf: f64, wins: u64, bound: f64, beta: f64) -> f64 {
    if wins == 0 || perf <= 0.0 || cost <= 0.0 {
        return 1.0;
    }
    let ratio = cost / perf;
    math::powf(bound / ratio, beta).min(1.0)
}

/// Mean penalty over constraints (1 when there are none).
pub fn mean_penalty(c: &RewardComponents, constraints: &[f64], beta: f64) -> f64 {
    if constraints.is_empty() {
        return 1.0;
    }
    let total: f64 = constraints
        .iter()
        .enumerate()
        .map(|(j, bound)| constraint_penalty(c.cost[j], c.perf[j], c.wins, *bound, beta))
        .sum();
    total / constraints.len() as f64
}

/// Scalar per-step reward encoding `spec`.
pub fn preference_reward(spec: &PreferenceSpec, c: &RewardComponents, constraints: &[f64]) -> f64 {
    match spec.kind {
        PreferenceKind::ValueOnly => c.value,
        PreferenceKind::ScoreProduct => c.value * mean_penalty(c, constraints, spec.beta),
        PreferenceKind::WeightedSum => c.value + spec.w * mean_penalty(c, constraints, spec.beta),
    }
}
