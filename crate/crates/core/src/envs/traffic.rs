//! Traffic Junction: two one-way roads crossing in the middle of a square
//! grid. An eastbound road runs along the middle row and a southbound road
//! along the middle column. Cars arrive at the west and north entry cells,
//! follow a fixed route (straight through, or a turn onto the crossing road
//! in its direction of travel) and leave the grid past the route's last
//! cell. Each car is controlled by the agent occupying its slot and chooses
//! between `gas` (advance one cell) and `brake` (hold).

use super::{EnvError, Environment, Observation, StepResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TjConfig {
    #[serde(default = "defaults::grid_dim")]
    pub grid_dim: usize,
    #[serde(default = "defaults::max_agents")]
    pub max_agents: usize,
    #[serde(default = "defaults::arrival_prob")]
    pub arrival_prob: f64,
    #[serde(default = "defaults::vision")]
    pub vision: usize,
    #[serde(default = "defaults::max_steps")]
    pub max_steps: usize,
    #[serde(default = "defaults::collision_reward")]
    pub collision_reward: f64,
    #[serde(default = "defaults::delay_penalty")]
    pub delay_penalty: f64,
}

mod defaults {
    pub fn grid_dim() -> usize {
        7
    }
    pub fn max_agents() -> usize {
        5
    }
    pub fn arrival_prob() -> f64 {
        0.3
    }
    pub fn vision() -> usize {
        1
    }
    pub fn max_steps() -> usize {
        20
    }
    pub fn collision_reward() -> f64 {
        -10.0
    }
    pub fn delay_penalty() -> f64 {
        0.01
    }
}

impl Default for TjConfig {
    fn default() -> Self {
        Self {
            grid_dim: defaults::grid_dim(),
            max_agents: defaults::max_agents(),
            arrival_prob: defaults::arrival_prob(),
            vision: defaults::vision(),
            max_steps: defaults::max_steps(),
            collision_reward: defaults::collision_reward(),
            delay_penalty: defaults::delay_penalty(),
        }
    }
}

impl TjConfig {
    /// Every violated constraint. `arrival_prob = 0` is accepted so that an
    /// empty junction can be simulated.
    pub fn validate(&self) -> Vec<EnvError> {
        let mut errs = Vec::new();
        let mut bad = |field, reason: String| errs.push(EnvError::InvalidConfig { field, reason });
        if self.grid_dim < 5 || self.grid_dim % 2 == 0 {
            bad("grid_dim", format!("must be odd and >= 5, got {}", self.grid_dim));
        }
        if self.max_agents == 0 {
            bad("max_agents", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.arrival_prob) {
            bad("arrival_prob", format!("must lie in [0, 1], got {}", self.arrival_prob));
        }
        if self.max_steps <= self.grid_dim {
            bad("max_steps", format!("must exceed grid_dim ({}), got {}", self.grid_dim, self.max_steps));
        }
        if !self.collision_reward.is_finite() {
            bad("collision_reward", "must be finite".into());
        }
        if !self.delay_penalty.is_finite() || self.delay_penalty < 0.0 {
            bad("delay_penalty", format!("must be finite and >= 0, got {}", self.delay_penalty));
        }
        errs
    }

    pub fn obs_dim(&self) -> usize {
        let patch = 2 * self.vision + 1;
        patch * patch * CHANNELS + self.grid_dim * self.grid_dim + ROUTES + 1
    }
}

/// Per-cell channels in the local patch: other car, road cell, own route.
const CHANNELS: usize = 3;
const ROUTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrafficAction {
    Gas = 0,
    Brake = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Car {
    pub route: usize,
    pub path_index: usize,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub step: usize,
    /// One slot per agent; a slot is reused by the next arrival once its car
    /// has left the grid.
    pub cars: Vec<Car>,
    /// Car slots per cell, row-major.
    pub occupancy: Vec<Vec<usize>>,
}

pub struct TrafficJunction {
    config: TjConfig,
    routes: Vec<Vec<(usize, usize)>>,
    /// Route ids per entry cell.
    entries: Vec<Vec<usize>>,
    road: Vec<bool>,
    state: EnvState,
    rng: ChaCha8Rng,
    ignored: usize,
}

impl TrafficJunction {
    pub fn new(config: TjConfig) -> Result<Self, EnvError> {
        if let Some(e) = config.validate().into_iter().next() {
            return Err(e);
        }
        let d = config.grid_dim;
        let mid = d / 2;
        let east: Vec<_> = (0..d).map(|c| (mid, c)).collect();
        let south: Vec<_> = (0..d).map(|r| (r, mid)).collect();
        let west_turn: Vec<_> = (0..=mid).map(|c| (mid, c)).chain((mid + 1..d).map(|r| (r, mid))).collect();
        let north_turn: Vec<_> = (0..=mid).map(|r| (r, mid)).chain((mid + 1..d).map(|c| (mid, c))).collect();
        let routes = vec![east, west_turn, south, north_turn];
        let mut road = vec![false; d * d];
        for route in &routes {
            for &(r, c) in route {
                road[r * d + c] = true;
            }
        }
        let state = EnvState { step: 0, cars: Vec::new(), occupancy: vec![Vec::new(); d * d] };
        Ok(Self {
            config,
            routes,
            entries: vec![vec![0, 1], vec![2, 3]],
            road,
            state,
            rng: ChaCha8Rng::seed_from_u64(0),
            ignored: 0,
        })
    }

    pub fn config(&self) -> &TjConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn route(&self, id: usize) -> &[(usize, usize)] {
        &self.routes[id]
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    pub fn entry_cells(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| self.routes[e[0]][0]).collect()
    }

    fn cell_index(&self, (r, c): (usize, usize)) -> usize {
        r * self.config.grid_dim + c
    }

    fn car_cell(&self, car: &Car) -> (usize, usize) {
        self.routes[car.route][car.path_index]
    }

    fn rebuild_occupancy(&mut self) {
        let mut occ = vec![Vec::new(); self.config.grid_dim * self.config.grid_dim];
        for (slot, car) in self.state.cars.iter().enumerate() {
            if car.alive {
                occ[self.cell_index(self.car_cell(car))].push(slot);
            }
        }
        self.state.occupancy = occ;
    }

    /// One arrival attempt per entry: if the entry cell is free and a slot
    /// is available, a car arrives with probability `arrival_prob` on a
    /// uniformly chosen route of that entry. The coin is always drawn, so
    /// the RNG stream does not depend on occupancy.
    fn spawn(&mut self) {
        for e in 0..self.entries.len() {
            let coin: f64 = self.rng.gen();
            let pick = self.rng.gen_range(0..self.entries[e].len());
            let entry = self.routes[self.entries[e][0]][0];
            let free_cell = self.state.occupancy[self.cell_index(entry)].is_empty();
            let Some(slot) = self.state.cars.iter().position(|c| !c.alive) else { continue };
            if free_cell && coin < self.config.arrival_prob {
                self.state.cars[slot] = Car { route: self.entries[e][pick], path_index: 0, alive: true };
                let idx = self.cell_index(entry);
                self.state.occupancy[idx].push(slot);
            }
        }
    }

    fn observe(&self, slot: usize) -> Observation {
        let cfg = &self.config;
        let d = cfg.grid_dim as isize;
        let mut features = vec![0.0; cfg.obs_dim()];
        let car = &self.state.cars[slot];
        if !car.alive {
            *features.last_mut().unwrap() = 1.0;
            return Observation { agent: slot, active: false, features };
        }
        let (r0, c0) = self.car_cell(car);
        let v = cfg.vision as isize;
        let route = &self.routes[car.route];
        let mut k = 0;
        for dr in -v..=v {
            for dc in -v..=v {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if (0..d).contains(&r) && (0..d).contains(&c) {
                    let cell = (r as usize, c as usize);
                    let idx = self.cell_index(cell);
                    let others = self.state.occupancy[idx].iter().any(|&s| s != slot);
                    features[k] = f64::from(others as u8);
                    features[k + 1] = f64::from(self.road[idx] as u8);
                    features[k + 2] = f64::from(route[car.path_index..].contains(&cell) as u8);
                }
                k += CHANNELS;
            }
        }
        features[k + self.cell_index((r0, c0))] = 1.0;
        k += cfg.grid_dim * cfg.grid_dim;
        features[k + car.route] = 1.0;
        Observation { agent: slot, active: true, features }
    }

    fn observations(&self) -> Vec<Observation> {
        (0..self.config.max_agents).map(|i| self.observe(i)).collect()
    }

    /// Cross-checks the car list against the occupancy map.
    pub fn is_consistent(&self) -> bool {
        let d = self.config.grid_dim;
        let mut seen = vec![Vec::new(); d * d];
        for (slot, car) in self.state.cars.iter().enumerate() {
            if car.alive {
                if car.path_index >= self.routes[car.route].len() {
                    return false;
                }
                seen[self.cell_index(self.car_cell(car))].push(slot);
            }
        }
        let mut occ = self.state.occupancy.clone();
        occ.iter_mut().for_each(|v| v.sort_unstable());
        occ == seen
    }
}

impl Environment for TrafficJunction {
    fn n_agents(&self) -> usize {
        self.config.max_agents
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<Observation> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let dead = Car { route: 0, path_index: 0, alive: false };
        self.state = EnvState {
            step: 0,
            cars: vec![dead; self.config.max_agents],
            occupancy: vec![Vec::new(); self.config.grid_dim * self.config.grid_dim],
        };
        self.ignored = 0;
        self.spawn();
        self.observations()
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<(Vec<Observation>, StepResult), EnvError> {
        let n = self.config.max_agents;
        if self.state.step >= self.config.max_steps {
            return Err(EnvError::Finished);
        }
        if actions.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: actions.len() });
        }
        for (i, (car, a)) in self.state.cars.iter().zip(actions).enumerate() {
            match (car.alive, a) {
                (true, None) => return Err(EnvError::MissingAction(i)),
                (true, Some(a)) if *a >= 2 => return Err(EnvError::InvalidAction { agent: i, action: *a, n_actions: 2 }),
                _ => {}
            }
        }
        self.state.step += 1;
        let tau = self.state.step as f64;
        let mut rewards = vec![0.0; n];
        let mut departed = vec![false; n];
        for (i, a) in actions.iter().enumerate() {
            let len = self.routes[self.state.cars[i].route].len();
            let car = &mut self.state.cars[i];
            if !car.alive {
                if a.is_some() {
                    self.ignored += 1;
                }
                continue;
            }
            if *a == Some(TrafficAction::Gas as usize) {
                if car.path_index + 1 == len {
                    car.alive = false;
                    departed[i] = true;
                } else {
                    car.path_index += 1;
                }
            }
        }
        self.rebuild_occupancy();
        let mut failures = 0;
        for cell in &self.state.occupancy {
            if cell.len() >= 2 {
                failures += 1;
                for &slot in cell {
                    rewards[slot] += self.config.collision_reward;
                }
            }
        }
        for (slot, car) in self.state.cars.iter().enumerate() {
            if car.alive {
                rewards[slot] -= self.config.delay_penalty * tau;
            }
        }
        let done = self.state.step >= self.config.max_steps;
        if !done {
            self.spawn();
        }
        Ok((self.observations(), StepResult { rewards, done, failures, departed }))
    }

    fn active(&self) -> Vec<bool> {
        self.state.cars.iter().map(|c| c.alive).collect()
    }

    fn ignored_actions(&self) -> usize {
        self.ignored
    }
}
