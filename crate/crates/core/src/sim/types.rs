use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// One auction item of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    pub index: usize,
    /// Impression value, also the conversion probability.
    pub value: f64,
    pub competitor_bids: Vec<f64>,
    /// Per-constraint performance indicator (realized conversion or constant 1).
    pub perf_indicators: Vec<f64>,
    /// Per-constraint cost charged if the impression is won.
    pub constraint_costs: Vec<f64>,
    /// Uniform draw deciding the conversion, fixed at generation time so that
    /// agents bidding on the same stream see the same conversions.
    pub conversion_draw: f64,
}

impl ImpressionOpportunity {
    /// Highest competing bid, i.e. the price paid on a win.
    pub fn max_competitor_bid(&self) -> f64 {
        self.competitor_bids.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub won: bool,
    pub cost: f64,
    pub conversion: bool,
}

/// Raw per-step reward ingredients; preference rewards are derived from these.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    /// Sum of values of won impressions.
    pub value: f64,
    /// Budget spent during the step.
    pub spend: f64,
    /// Per-constraint cost sums, `sum_i c_ij o_i`.
    pub cost: Vec<f64>,
    /// Per-constraint performance sums, `sum_i p_ij o_i`.
    pub perf: Vec<f64>,
    pub wins: u64,
}

impl RewardComponents {
    pub fn zeros(n_constraints: usize) -> Self {
        RewardComponents {
            value: 0.0,
            spend: 0.0,
            cost: alloc::vec![0.0; n_constraints],
            perf: alloc::vec![0.0; n_constraints],
            wins: 0,
        }
    }

    pub fn accumulate(&mut self, other: &RewardComponents) {
        self.value += other.value;
        self.spend += other.spend;
        for (a, b) in self.cost.iter_mut().zip(&other.cost) {
            *a += b;
        }
        for (a, b) in self.perf.iter_mut().zip(&other.perf) {
            *a += b;
        }
        self.wins += other.wins;
    }
}
