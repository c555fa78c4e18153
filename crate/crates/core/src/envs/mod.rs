//! Partially observable cooperative environments.
//!
//! Both environments expose the same [`Environment`] interface: a fixed
//! number of agent slots, one discrete action per active slot per step, a
//! flat observation vector per slot, and per-agent rewards.

mod sum_signal;
mod traffic;

pub use sum_signal::{SumSignal, SumSignalConfig};
pub use traffic::{Car, EnvState, TrafficAction, TrafficJunction, TjConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent {0} is active but no action was given")]
    MissingAction(usize),
    #[error("agent {agent} chose action {action}, only {n_actions} exist")]
    InvalidAction { agent: usize, action: usize, n_actions: usize },
    #[error("episode already finished")]
    Finished,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent: usize,
    pub active: bool,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Failure events this step: collisions in the junction, wrong answers
    /// in the sum-signaling task.
    pub failures: usize,
    /// Slots whose agent left the environment this step. A slot that is
    /// active again on the next step then holds a new agent.
    pub departed: Vec<bool>,
}

pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<Observation>;
    /// `actions[i]` must be `Some` for every active agent. Actions given to
    /// inactive agents are ignored and tallied in [`Environment::ignored_actions`].
    fn step(&mut self, actions: &[Option<usize>]) -> Result<(Vec<Observation>, StepResult), EnvError>;
    fn active(&self) -> Vec<bool>;
    fn ignored_actions(&self) -> usize;
}

/// Failure tally over a finished episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeRecord {
    pub steps: usize,
    pub failures: usize,
}

impl EpisodeRecord {
    pub fn record(&mut self, step: &StepResult) {
        self.steps += 1;
        self.failures += step.failures;
    }
}

/// An episode succeeds iff no failure event happened at any step.
pub fn episode_success(record: &EpisodeRecord) -> bool {
    record.failures == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    TrafficJunction(TjConfig),
    SumSignal(SumSignalConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self {
            EnvConfig::TrafficJunction(c) => Box::new(TrafficJunction::new(c.clone())?),
            EnvConfig::SumSignal(c) => Box::new(SumSignal::new(c.clone())?),
        })
    }

    pub fn validate(&self) -> Vec<EnvError> {
        match self {
            EnvConfig::TrafficJunction(c) => c.validate(),
            EnvConfig::SumSignal(c) => c.validate(),
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            EnvConfig::TrafficJunction(c) => c.max_agents,
            EnvConfig::SumSignal(c) => c.agents,
        }
    }
}
