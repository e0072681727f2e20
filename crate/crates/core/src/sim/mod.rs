//! Synthetic constrained second-price auction environment.
//!
//! An episode (advertising period) is split into `period_length` steps. At
//! every step the agent submits one bid coefficient; every impression of the
//! step is then bid for with `coefficient * value` and cleared against the
//! scripted opponents' bids at second price.

mod agent;
mod auction;
mod config;
mod env;
mod features;
mod scripted;
mod types;

pub use agent::{run_episode, BiddingAgent, EpisodeLog, StepRecord};
pub use auction::{compute_bid, run_auction};
pub use config::{ActionMode, AdvertiserProfile, BetaDist, Constraint, EnvConfig, IndicatorKind, OpponentMix};
pub use env::{AuctionEnv, EnvState, StepLog, StepOutcome};
pub use features::{build_state_features, StateVector, FEATURE_NAMES, STATE_DIM};
pub use scripted::{ScriptedAgent, ScriptedPolicy};
pub use types::{AuctionOutcome, ImpressionOpportunity, RewardComponents};
