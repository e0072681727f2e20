//! Generative auto-bidding with post-training search.
//!
//! The crate is `no_std` + `alloc`: it holds the auction simulator, the
//! trajectory data model, a small reverse-mode transformer, the
//! return-conditioned policy, the IQL critic ensemble, the Q-voting search
//! and the evaluation metrics. File formats and the CLI live in `gas-lab`.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod math;
pub mod policy;
pub mod approx;
pub mod critic;
pub mod data;
pub mod encode;
pub mod eval;
pub mod search;
pub mod sim;

pub use error::{Error, Result};
