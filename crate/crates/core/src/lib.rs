//! Learned multi-round communication for cooperative multi-agent
//! reinforcement learning.
//!
//! The crate is split by concern:
//!
//! * [`gradcore`]: dense matrices and a reverse-mode gradient engine.
//! * [`envs`]: the Traffic Junction benchmark and a sum-signaling toy task.
//! * [`protocol`]: the L-round encode / topology / aggregate / update engine,
//!   with a batched centralized path and a per-agent decentralized path.
//! * [`metrics`]: message entropy, pairwise similarity, communication counts
//!   and the efficiency indices built from them.
//! * [`training`]: actor-critic rollouts, the efficiency-augmented loss with
//!   dynamic weights, and greedy evaluation.

pub mod gradcore;
pub mod envs;
pub mod metrics;
pub mod protocol;
pub mod training;
