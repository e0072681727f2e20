use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaDist {
    pub a: f64,
    pub b: f64,
}

impl BetaDist {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Number of scripted opponents of each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpponentMix {
    /// Opponents bidding a fixed coefficient all period.
    pub constant: usize,
    /// Opponents whose coefficient follows a daily pacing curve.
    pub pacing: usize,
}

impl OpponentMix {
    pub fn total(&self) -> usize {
        self.constant + self.pacing
    }
}

/// How an action maps onto the bid coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    /// The action is the coefficient itself.
    Absolute,
    /// The action is added to the previous coefficient.
    Increment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub impressions_per_step: usize,
    pub period_length: usize,
    pub value_dist: BetaDist,
    pub opponent_mix: OpponentMix,
    pub budget: f64,
    pub cpa_constraint: f64,
    pub seed: u64,
    pub lambda_max: f64,
    pub action_mode: ActionMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            impressions_per_step: 1000,
            period_length: 48,
            value_dist: BetaDist { a: 2.0, b: 8.0 },
            opponent_mix: OpponentMix { constant: 3, pacing: 2 },
            budget: 150_000.0,
            cpa_constraint: 100.0,
            seed: 1,
            lambda_max: 500.0,
            action_mode: ActionMode::Absolute,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.impressions_per_step == 0 {
            return bad("impressions_per_step must be >= 1".into());
        }
        if self.period_length == 0 {
            return bad("period_length must be >= 1".into());
        }
        if !(self.value_dist.a > 0.0 && self.value_dist.b > 0.0) {
            return bad(format!("beta parameters must be > 0, got ({}, {})", self.value_dist.a, self.value_dist.b));
        }
        if self.opponent_mix.total() == 0 {
            return bad("opponent_mix needs at least one opponent".into());
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad(format!("budget must be > 0, got {}", self.budget));
        }
        if !(self.cpa_constraint > 0.0 && self.cpa_constraint.is_finite()) {
            return bad(format!("cpa_constraint must be > 0, got {}", self.cpa_constraint));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be > 0, got {}", self.lambda_max));
        }
        Ok(())
    }

    /// Range of valid agent actions under the configured action mode.
    pub fn action_bounds(&self) -> (f64, f64) {
        match self.action_mode {
            ActionMode::Absolute => (0.0, self.lambda_max),
            ActionMode::Increment => (-self.lambda_max, self.lambda_max),
        }
    }

    /// The advertiser this config describes: one CPA constraint on conversions.
    pub fn profile(&self) -> AdvertiserProfile {
        AdvertiserProfile {
            budget: self.budget,
            constraints: vec![Constraint { bound: self.cpa_constraint, kind: IndicatorKind::Conversion }],
            period_length: self.period_length,
        }
    }
}

/// What `p_ij` measures for a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorKind {
    /// Realized conversion (CPA-style constraint).
    Conversion,
    /// Always 1 (cost-per-impression style constraint).
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    /// Upper bound `C_j` on `sum c_ij o_i / sum p_ij o_i`.
    pub bound: f64,
    pub kind: IndicatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserProfile {
    pub budget: f64,
    pub constraints: Vec<Constraint>,
    pub period_length: usize,
}

impl AdvertiserProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("budget must be > 0, got {}", self.budget)));
        }
        if self.period_length == 0 {
            return Err(Error::Config("period_length must be >= 1".into()));
        }
        if let Some(c) = self.constraints.iter().find(|c| !(c.bound > 0.0)) {
            return Err(Error::Config(format!("constraint bound must be > 0, got {}", c.bound)));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.bound).collect()
    }

    pub fn with_budget(&self, budget: f64) -> Self {
        AdvertiserProfile { budget, ..self.clone() }
    }
}
