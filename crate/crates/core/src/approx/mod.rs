//! Minimal differentiable sequence approximator.
//!
//! A pre-norm causal transformer over interleaved per-timestep tokens,
//! a matrix-level reverse-mode tape, AdamW and target-network soft updates.

mod gradcheck;
mod matrix;
mod net;
mod optim;
mod params;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use matrix::Matrix;
pub use net::{Activation, NetworkSpec, SeqInput, SeqNet};
pub use optim::{clip_grad_norm, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{soft_update, ParameterSet, TensorMeta};
pub use tape::{AttentionScope, Tape, Var};
