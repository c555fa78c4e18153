//! One-step cooperative signaling task. Each agent privately sees one digit
//! and must answer the sum of all agents' digits modulo 10. A lone agent
//! can only guess, so the task is solvable only through communication.

use super::{EnvError, Environment, Observation, StepResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DIGITS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SumSignalConfig {
    #[serde(default = "default_agents")]
    pub agents: usize,
}

fn default_agents() -> usize {
    3
}

impl Default for SumSignalConfig {
    fn default() -> Self {
        Self { agents: default_agents() }
    }
}

impl SumSignalConfig {
    pub fn validate(&self) -> Vec<EnvError> {
        if self.agents == 0 {
            return vec![EnvError::InvalidConfig { field: "agents", reason: "must be positive".into() }];
        }
        Vec::new()
    }
}

pub struct SumSignal {
    agents: usize,
    digits: Vec<usize>,
    finished: bool,
    ignored: usize,
}

impl SumSignal {
    pub fn new(config: SumSignalConfig) -> Result<Self, EnvError> {
        if let Some(e) = config.validate().into_iter().next() {
            return Err(e);
        }
        Ok(Self { agents: config.agents, digits: vec![0; config.agents], finished: false, ignored: 0 })
    }

    pub fn digits(&self) -> &[usize] {
        &self.digits
    }

    /// Sets the private digits directly and returns the matching observations.
    pub fn reset_with(&mut self, digits: &[usize]) -> Vec<Observation> {
        assert_eq!(digits.len(), self.agents);
        assert!(digits.iter().all(|&d| d < DIGITS));
        self.digits = digits.to_vec();
        self.finished = false;
        self.observations()
    }

    pub fn answer(&self) -> usize {
        self.digits.iter().sum::<usize>() % DIGITS
    }

    fn observations(&self) -> Vec<Observation> {
        self.digits
            .iter()
            .enumerate()
            .map(|(agent, &d)| {
                let mut features = vec![0.0; DIGITS];
                features[d] = 1.0;
                Observation { agent, active: true, features }
            })
            .collect()
    }
}

impl Environment for SumSignal {
    fn n_agents(&self) -> usize {
        self.agents
    }

    fn obs_dim(&self) -> usize {
        DIGITS
    }

    fn n_actions(&self) -> usize {
        DIGITS
    }

    fn reset(&mut self, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let digits: Vec<usize> = (0..self.agents).map(|_| rng.gen_range(0..DIGITS)).collect();
        self.reset_with(&digits)
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<(Vec<Observation>, StepResult), EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        if actions.len() != self.agents {
            return Err(EnvError::ActionCount { expected: self.agents, got: actions.len() });
        }
        let answer = self.answer();
        let mut rewards = Vec::with_capacity(self.agents);
        for (i, a) in actions.iter().enumerate() {
            let a = a.ok_or(EnvError::MissingAction(i))?;
            if a >= DIGITS {
                return Err(EnvError::InvalidAction { agent: i, action: a, n_actions: DIGITS });
            }
            rewards.push(if a == answer { 1.0 } else { 0.0 });
        }
        let failures = rewards.iter().filter(|&&r| r == 0.0).count();
        self.finished = true;
        Ok((self.observations(), StepResult { rewards, done: true, failures, departed: vec![true; self.agents] }))
    }

    fn active(&self) -> Vec<bool> {
        vec![true; self.agents]
    }

    fn ignored_actions(&self) -> usize {
        self.ignored
    }
}
