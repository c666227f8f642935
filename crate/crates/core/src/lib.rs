//! Bottom-up sparse Q-networks for cooperative multi-agent navigation.
//!
//! A single factored Q-network maps the joint observation of `N` agents to
//! one head of action values per agent. Training starts from a
//! block-diagonal mask, so every agent computes its values from its own
//! observation only. During a fixed window, masked-off cross-agent weights
//! with the largest loss gradient are switched on (at value zero) until a
//! global budget is exhausted. The grown connections are the communication
//! links the task turned out to need.
//!
//! Module map:
//!
//! * [`numerics`]: masked linear layers, the Q-network, backpropagation, Adam.
//! * [`topology`]: agent partitions, block-diagonal masks, growth selection.
//! * [`dqn`]: replay buffer, ε-greedy selection, per-head TD loss, target updates.
//! * [`scheduler`]: the training loop with scheduled emergence and the
//!   prune-and-grow baseline.
//! * [`envs`]: the cooperative navigation variants.
//! * [`metrics`]: FLOPs, evaluation, robustness sweeps, CSV output.
//! * [`config`], [`checkpoint`], [`run`]: experiment configuration, persistence,
//!   and orchestration used by the `bun` binary.

pub mod checkpoint;
pub mod config;
pub mod dqn;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod run;
pub mod scheduler;
pub mod topology;

pub use error::{Error, Result};
