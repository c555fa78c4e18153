//! Centralized actor-critic training with an optional efficiency-augmented
//! loss, and greedy decentralized evaluation.
//!
//! One epoch runs `episodes_per_epoch` episodes in lockstep on a single
//! gradient graph, builds
//!
//! ```text
//! L_t     = l_a + w_q * l_Q
//! L_total = L_t + w_IEI * H~ + w_SEI * xi~            (augmented)
//! H~      = H * (1 - beta * S'),  xi~ = xi * (1 - beta * S'),  S' = max(S, floor)
//! w       = clamp(alpha * L_t / (term + eps), lambda_min, lambda_max)
//! ```
//!
//! and applies one optimizer step. The weights and `S'` are constants within
//! an epoch; the entropy and similarity terms are differentiable functions of
//! the sent messages.

use crate::envs::{EnvConfig, EnvError, Environment, Observation};
use crate::gradcore::{AdamState, GradError, Graph, Matrix, NodeId, ParamStore};
use crate::metrics::{EpochStats, MetricsError, RoundTally};
use crate::protocol::decentralized::run_decentralized;
use crate::protocol::{Mode, Protocol, ProtocolError, ProtocolSpec, RoundNodes, Roster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    /// Critic loss weight `w_q`.
    pub value_weight: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Rounds during training; defaults to the protocol's `rounds`.
    pub train_rounds: Option<usize>,
    /// Rounds during evaluation; defaults to `train_rounds`.
    pub eval_rounds: Option<usize>,
    pub eps: f64,
    /// Minimum success rate used in the clamped ratios.
    pub success_floor: f64,
    pub beta: f64,
    pub alpha: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub augmentation: bool,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Policy-entropy bonus coefficient; 0 disables the term entirely.
    pub entropy_bonus: f64,
    /// Evaluate greedily every this many epochs (0 = never).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Stop early once a periodic greedy evaluation reaches this success rate.
    pub stop_success: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            gamma: 1.0,
            value_weight: 0.5,
            epochs: 500,
            episodes_per_epoch: 64,
            train_rounds: None,
            eval_rounds: None,
            eps: 1e-10,
            success_floor: 0.05,
            beta: 0.5,
            alpha: 0.01,
            lambda_min: 1e-5,
            lambda_max: 5e-3,
            augmentation: false,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            entropy_bonus: 0.0,
            eval_interval: 0,
            eval_episodes: 200,
            checkpoint_interval: 0,
            stop_success: None,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<TrainError> {
        let mut errs = Vec::new();
        let mut bad = |field: &'static str, reason: String| errs.push(TrainError::Config { field, reason });
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad("learning_rate", format!("must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bad("gamma", format!("must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.value_weight >= 0.0 && self.value_weight.is_finite()) {
            bad("value_weight", format!("must be finite and >= 0, got {}", self.value_weight));
        }
        if self.episodes_per_epoch == 0 {
            bad("episodes_per_epoch", "must be positive".into());
        }
        if !(self.eps > 0.0) {
            bad("eps", format!("must be positive, got {}", self.eps));
        }
        if !(self.success_floor > 0.0 && self.success_floor <= 1.0) {
            bad("success_floor", format!("must lie in (0, 1], got {}", self.success_floor));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            bad("beta", format!("must lie in [0, 1], got {}", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad("alpha", format!("must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lambda_min >= 0.0) {
            bad("lambda_min", format!("must be >= 0, got {}", self.lambda_min));
        }
        if !(self.lambda_min <= self.lambda_max) {
            bad("lambda_min", format!("lambda_min = {} exceeds lambda_max = {}", self.lambda_min, self.lambda_max));
        }
        if !(self.entropy_bonus >= 0.0 && self.entropy_bonus.is_finite()) {
            bad("entropy_bonus", format!("must be finite and >= 0, got {}", self.entropy_bonus));
        }
        if let Some(t) = self.stop_success {
            if !(t > 0.0 && t <= 1.0) {
                bad("stop_success", format!("must lie in (0, 1], got {t}"));
            }
            if self.eval_interval == 0 {
                bad("stop_success", "needs eval_interval > 0".into());
            }
        }
        if self.eval_interval > 0 && self.eval_episodes == 0 {
            bad("eval_episodes", "must be positive when eval_interval is set".into());
        }
        errs
    }

    pub fn train_rounds(&self, spec: &ProtocolSpec) -> usize {
        self.train_rounds.unwrap_or(spec.rounds)
    }

    pub fn eval_rounds(&self, spec: &ProtocolSpec) -> usize {
        self.eval_rounds.unwrap_or_else(|| self.train_rounds(spec))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: `{field}` {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `S' = max(S, floor)`; `H~ = H (1 - beta S')`, `xi~ = xi (1 - beta S')`.
pub fn smoothed_terms(entropy: f64, similarity: f64, success: f64, beta: f64, floor: f64) -> (f64, f64) {
    let factor = smoothing_factor(success, beta, floor);
    (entropy * factor, similarity * factor)
}

fn smoothing_factor(success: f64, beta: f64, floor: f64) -> f64 {
    1.0 - beta * success.max(floor)
}

/// `clamp(alpha * L_t / (term + eps), lambda_min, lambda_max)` per term.
pub fn dynamic_weights(loss: f64, iei: f64, sei: f64, c: &TrainConfig) -> (f64, f64) {
    let w = |term: f64| (c.alpha * loss / (term + c.eps)).clamp(c.lambda_min, c.lambda_max);
    (w(iei), w(sei))
}

pub fn augmented_loss(loss: f64, iei: f64, sei: f64, w_iei: f64, w_sei: f64) -> f64 {
    loss + w_iei * iei + w_sei * sei
}

/// Undiscounted (for `gamma = 1`) return-to-go per step, restarting whenever
/// `continues[t]` is false (the agent is gone after step `t`).
pub fn returns_to_go(rewards: &[f64], continues: &[bool], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        if !continues[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Zero mean, unit variance (population), with `1e-8` added to the std.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Loss components of one epoch. The weights are zero when augmentation is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub base: f64,
    pub iei_term: f64,
    pub sei_term: f64,
    pub w_iei: f64,
    pub w_sei: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub losses: LossReport,
    /// Greedy evaluation success, when this epoch was an evaluation epoch.
    pub eval_success: Option<f64>,
    pub topologies: Vec<Matrix>,
}

impl EpochReport {
    /// True once a greedy evaluation reached the configured stop target.
    pub fn reached(&self, target: Option<f64>) -> bool {
        matches!((self.eval_success, target), (Some(s), Some(t)) if s >= t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamState::new(params)),
        }
    }

    /// Applies accumulated gradients. A zero learning rate leaves every
    /// parameter and optimizer moment untouched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<(), GradError> {
        if lr == 0.0 {
            params.zero_grads();
            return Ok(());
        }
        match self {
            Self::Sgd => crate::gradcore::sgd_step(params, lr).map(|_| ()),
            Self::Adam(a) => a.step(params, lr).map(|_| ()),
        }
    }
}

/// Independent RNG per `(seed, tags...)`, so any episode can be replayed
/// without running the ones before it.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tags.iter().fold(splitmix(seed), |h, &t| splitmix(h ^ splitmix(t))))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 0;
const TAG_ENV: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_EVAL: u64 = 3;

/// Everything recorded for one decision step of the batched rollout.
struct StepRecord {
    /// Episode index of each `n`-row group.
    episodes: Vec<usize>,
    roster: Roster,
    log_pi: NodeId,
    value: NodeId,
    neg_entropy: Option<NodeId>,
    rounds: Vec<RoundNodes>,
    rewards: Vec<f64>,
    departed: Vec<bool>,
}

/// One active agent-step of a rollout, as it entered the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentStep {
    pub log_pi: f64,
    pub value: f64,
    /// Raw return-to-go.
    pub ret: f64,
    /// Return after batch normalization; the actual critic target.
    pub target: f64,
}

/// `l_a = -mean(log pi * (target - V))`, `l_Q = mean((V - target)^2)`,
/// `L_t = l_a + w_q l_Q`; returns `(L_t, l_a, l_Q)`.
pub fn base_loss(samples: &[AgentStep], value_weight: f64) -> (f64, f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = samples.len() as f64;
    let la = -samples.iter().map(|s| s.log_pi * (s.target - s.value)).sum::<f64>() / n;
    let lq = samples.iter().map(|s| (s.value - s.target).powi(2)).sum::<f64>() / n;
    (la + value_weight * lq, la, lq)
}

/// Output of building one epoch's loss graph.
pub struct EpochGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub losses: LossReport,
    pub stats: EpochStats,
    /// Differentiable epoch entropy and similarity, when built.
    pub entropy: Option<NodeId>,
    pub similarity: Option<NodeId>,
    pub samples: Vec<AgentStep>,
    /// Sampled topology of every (round, episode) pair, step by step.
    pub topologies: Vec<Matrix>,
}

pub struct Trainer {
    pub protocol: Protocol,
    pub env: EnvConfig,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(env: EnvConfig, spec: ProtocolSpec, config: TrainConfig) -> Result<Self, TrainError> {
        if let Some(e) = config.validate().into_iter().next() {
            return Err(e);
        }
        if let Some(e) = env.validate().into_iter().next() {
            return Err(e.into());
        }
        let probe = env.build()?;
        let protocol = Protocol::new(spec, probe.n_agents(), probe.obs_dim(), probe.n_actions())?;
        let params = protocol.init_params(&mut substream(config.seed, &[TAG_INIT]));
        let optimizer = OptimizerState::new(config.optimizer, &params);
        Ok(Self { protocol, env, config, params, optimizer, epoch: 0 })
    }

    /// Builds rollouts and the loss graph for epoch `epoch` (1-based) under
    /// `params`, without touching the trainer.
    pub fn build_epoch(&self, params: &ParamStore, epoch: usize) -> Result<EpochGraph, TrainError> {
        let cfg = &self.config;
        let proto = &self.protocol;
        let n = proto.n_agents;
        let rounds = cfg.train_rounds(&proto.spec);
        let episodes = cfg.episodes_per_epoch;
        let mut envs: Vec<Box<dyn Environment>> = Vec::with_capacity(episodes);
        let mut obs: Vec<Vec<Observation>> = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut e = self.env.build()?;
            let seed = substream(cfg.seed, &[TAG_ENV, epoch as u64, ep as u64]).gen();
            obs.push(e.reset(seed));
            envs.push(e);
        }
        let mut sampler = substream(cfg.seed, &[TAG_SAMPLE, epoch as u64]);
        let mut g = Graph::new();
        let leaves = proto.leaves(&mut g, params);
        let mut running: Vec<usize> = (0..episodes).collect();
        let mut failures = vec![0usize; episodes];
        let mut tally = RoundTally::default();
        let mut topologies = Vec::new();
        let mut steps: Vec<StepRecord> = Vec::new();

        while !running.is_empty() {
            let mut flat = Vec::with_capacity(running.len() * n);
            for &ep in &running {
                flat.extend(obs[ep].iter().cloned());
            }
            let (obs_matrix, active) = proto.observation_matrix(&flat)?;
            let roster = Roster::new(n, active);
            let fwd = proto.step_forward(&mut g, &leaves, obs_matrix, rounds, &roster, &mut sampler, Mode::Training)?;
            for s in proto.round_states(&g, &fwd.rounds, &roster) {
                tally.push(&s);
                topologies.push(s.topology);
            }
            let actions = proto.act(g.value(fwd.log_probs), &roster, &mut sampler, Mode::Training);
            let mut chosen = Matrix::zeros(roster.rows(), proto.n_actions);
            for (r, a) in actions.iter().enumerate() {
                if let Some(a) = a {
                    chosen.set(r, *a, 1.0);
                }
            }
            let chosen = g.constant(chosen);
            let picked = g.mul(fwd.log_probs, chosen)?;
            let log_pi = g.sum_rows(picked)?;
            let value = proto.critic(&mut g, &leaves, fwd.hidden, running.len())?;
            let neg_entropy = if cfg.entropy_bonus > 0.0 {
                let p = g.softmax(fwd.logits)?;
                let plogp = g.xlogx(p)?;
                Some(g.sum_rows(plogp)?)
            } else {
                None
            };

            let mut rewards = Vec::with_capacity(roster.rows());
            let mut departed = Vec::with_capacity(roster.rows());
            let mut next_running = Vec::with_capacity(running.len());
            for (k, &ep) in running.iter().enumerate() {
                let (next, res) = envs[ep].step(&actions[k * n..(k + 1) * n])?;
                failures[ep] += res.failures;
                rewards.extend_from_slice(&res.rewards);
                departed.extend_from_slice(&res.departed);
                obs[ep] = next;
                if !res.done {
                    next_running.push(ep);
                }
            }
            steps.push(StepRecord {
                episodes: running.clone(),
                roster,
                log_pi,
                value,
                neg_entropy,
                rounds: fwd.rounds,
                rewards,
                departed,
            });
            running = next_running;
        }

        let success = failures.iter().filter(|&&f| f == 0).count() as f64 / episodes as f64;
        let stats = EpochStats::from_tally(epoch, success, &tally, cfg.success_floor)?;
        let (raw, returns, count) = self.normalized_returns(&steps);
        let mut samples = Vec::with_capacity(count);
        for ((s, ret), target) in steps.iter().zip(&raw).zip(&returns) {
            for r in (0..s.roster.rows()).filter(|&r| s.roster.active[r]) {
                samples.push(AgentStep {
                    log_pi: g.value(s.log_pi).get(r, 0),
                    value: g.value(s.value).get(r, 0),
                    ret: ret[r],
                    target: target[r],
                });
            }
        }
        let inv_count = if count > 0 { 1.0 / count as f64 } else { 0.0 };

        // Actor, critic and optional policy-entropy terms, summed over steps.
        let mut policy = None;
        let mut value = None;
        let mut bonus = None;
        for (s, ret) in steps.iter().zip(&returns) {
            let v = g.value(s.value).clone();
            let rows = s.roster.rows();
            let mask = Matrix::from_vec(rows, 1, s.roster.active.iter().map(|&a| if a { inv_count } else { 0.0 }).collect());
            let coeff = Matrix::from_vec(
                rows,
                1,
                (0..rows).map(|r| if s.roster.active[r] { -(ret[r] - v.get(r, 0)) * inv_count } else { 0.0 }).collect(),
            );
            let coeff = g.constant(coeff);
            let term = g.mul(s.log_pi, coeff)?;
            let term = g.sum(term)?;
            policy = Some(accumulate(&mut g, policy, term)?);

            let target = g.constant(Matrix::from_vec(rows, 1, ret.clone()));
            let diff = g.sub(s.value, target)?;
            let sq = g.mul(diff, diff)?;
            let mask_node = g.constant(mask);
            let sq = g.mul(sq, mask_node)?;
            let term = g.sum(sq)?;
            value = Some(accumulate(&mut g, value, term)?);

            if let Some(ne) = s.neg_entropy {
                let term = g.mul(ne, mask_node)?;
                let term = g.sum(term)?;
                bonus = Some(accumulate(&mut g, bonus, term)?);
            }
        }
        let zero = || Matrix::scalar(0.0);
        let policy = policy.unwrap_or_else(|| g.constant(zero()));
        let value = value.unwrap_or_else(|| g.constant(zero()));
        let scaled_value = g.scale(value, cfg.value_weight)?;
        let base = g.add(policy, scaled_value)?;
        let mut losses = LossReport {
            policy: g.scalar(policy),
            value: g.scalar(value),
            base: g.scalar(base),
            ..LossReport::default()
        };

        let mut total = base;
        let (mut entropy_node, mut similarity_node) = (None, None);
        if cfg.augmentation {
            let factor = smoothing_factor(success, cfg.beta, cfg.success_floor);
            entropy_node = self.entropy_node(&mut g, &steps)?;
            similarity_node = self.similarity_node(&mut g, &steps)?;
            let iei = match entropy_node {
                Some(h) => Some(g.scale(h, factor)?),
                None => None,
            };
            let sei = match similarity_node {
                Some(x) => Some(g.scale(x, factor)?),
                None => None,
            };
            losses.iei_term = iei.map_or(0.0, |id| g.scalar(id));
            losses.sei_term = sei.map_or(0.0, |id| g.scalar(id));
            let (w_iei, w_sei) = dynamic_weights(losses.base, losses.iei_term, losses.sei_term, cfg);
            losses.w_iei = w_iei;
            losses.w_sei = w_sei;
            for (term, w) in [(iei, w_iei), (sei, w_sei)] {
                if let Some(term) = term {
                    let t = g.scale(term, w)?;
                    total = g.add(total, t)?;
                }
            }
        }
        if let Some(b) = bonus {
            let b = g.scale(b, cfg.entropy_bonus)?;
            total = g.add(total, b)?;
        }
        losses.total = g.scalar(total);
        g.mark_output("loss", total);
        Ok(EpochGraph {
            graph: g,
            total,
            losses,
            stats,
            entropy: entropy_node,
            similarity: similarity_node,
            samples,
            topologies,
        })
    }

    /// Per-step raw and normalized returns (zero on inactive rows) and the
    /// number of active agent-steps.
    #[allow(clippy::type_complexity)]
    fn normalized_returns(&self, steps: &[StepRecord]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, usize) {
        let n = self.protocol.n_agents;
        let episodes = self.config.episodes_per_epoch;
        // Per (episode, agent) time series over the steps the episode ran.
        let mut series: Vec<Vec<(usize, usize, f64, bool)>> = vec![Vec::new(); episodes * n];
        for (t, s) in steps.iter().enumerate() {
            for (k, &ep) in s.episodes.iter().enumerate() {
                for i in 0..n {
                    let r = k * n + i;
                    if s.roster.active[r] {
                        series[ep * n + i].push((t, r, s.rewards[r], !s.departed[r]));
                    }
                }
            }
        }
        let mut returns: Vec<Vec<f64>> = steps.iter().map(|s| vec![0.0; s.roster.rows()]).collect();
        let mut raw = returns.clone();
        let mut flat = Vec::new();
        let mut slots = Vec::new();
        for seq in &series {
            // Consecutive active steps of one slot belong to the same agent
            // unless it departed in between.
            let continues: Vec<bool> =
                (0..seq.len()).map(|k| k + 1 < seq.len() && seq[k].3 && seq[k + 1].0 == seq[k].0 + 1).collect();
            let rewards: Vec<f64> = seq.iter().map(|x| x.2).collect();
            for (k, g) in returns_to_go(&rewards, &continues, self.config.gamma).into_iter().enumerate() {
                flat.push(g);
                slots.push((seq[k].0, seq[k].1));
            }
        }
        let count = flat.len();
        for ((v, g), (t, r)) in normalize(&flat).into_iter().zip(&flat).zip(slots) {
            returns[t][r] = v;
            raw[t][r] = *g;
        }
        (raw, returns, count)
    }

    /// Differentiable mean message entropy in bits, averaged like
    /// [`RoundTally`]: over active agents, then over (step, episode, round).
    fn entropy_node(&self, g: &mut Graph, steps: &[StepRecord]) -> Result<Option<NodeId>, TrainError> {
        let n = self.protocol.n_agents;
        let d = self.protocol.spec.message_dim;
        let counted: usize = steps
            .iter()
            .map(|s| s.rounds.len() * (0..s.roster.groups()).filter(|&k| s.roster.active[k * n..(k + 1) * n].contains(&true)).count())
            .sum();
        if counted == 0 {
            return Ok(None);
        }
        let scale = -1.0 / (counted as f64 * std::f64::consts::LN_2);
        let mut acc = None;
        for s in steps {
            let rows = s.roster.rows();
            let mut w = Matrix::zeros(rows, 1);
            for k in 0..s.roster.groups() {
                let live = s.roster.active[k * n..(k + 1) * n].iter().filter(|&&a| a).count();
                for i in 0..n {
                    if s.roster.active[k * n + i] {
                        w.set(k * n + i, 0, 1.0 / live as f64);
                    }
                }
            }
            let ones = g.constant(Matrix::filled(1, d, 1.0));
            let eps = g.constant(Matrix::filled(rows, 1, crate::metrics::NORM_EPS));
            let w = g.constant(w);
            for round in &s.rounds {
                let a = g.abs(round.pre_messages)?;
                let total = g.sum_rows(a)?;
                let total = g.add(total, eps)?;
                let total = g.matmul(total, ones)?;
                let p = g.div(a, total)?;
                let plogp = g.xlogx(p)?;
                let per_agent = g.sum_rows(plogp)?;
                let weighted = g.mul(per_agent, w)?;
                let term = g.sum(weighted)?;
                acc = Some(accumulate(g, acc, term)?);
            }
        }
        Ok(Some(g.scale(acc.expect("counted > 0"), scale)?))
    }

    /// Differentiable mean pairwise cosine similarity of sent messages.
    fn similarity_node(&self, g: &mut Graph, steps: &[StepRecord]) -> Result<Option<NodeId>, TrainError> {
        let n = self.protocol.n_agents;
        let d = self.protocol.spec.message_dim;
        let live = |s: &StepRecord, k: usize| s.roster.active[k * n..(k + 1) * n].iter().filter(|&&a| a).count();
        let counted: usize =
            steps.iter().map(|s| s.rounds.len() * (0..s.roster.groups()).filter(|&k| live(s, k) >= 2).count()).sum();
        if counted == 0 {
            return Ok(None);
        }
        let mut acc = None;
        for s in steps {
            let rows = s.roster.rows();
            let mut w = Matrix::zeros(rows, n);
            for k in 0..s.roster.groups() {
                let m = live(s, k);
                if m < 2 {
                    continue;
                }
                let pairs = (m * (m - 1) / 2) as f64;
                for i in 0..n {
                    for j in i + 1..n {
                        if s.roster.active[k * n + i] && s.roster.active[k * n + j] {
                            w.set(k * n + i, j, 1.0 / (pairs * counted as f64));
                        }
                    }
                }
            }
            let w = g.constant(w);
            let ones = g.constant(Matrix::filled(1, d, 1.0));
            for round in &s.rounds {
                let m = round.pre_messages;
                let sq = g.mul(m, m)?;
                let norm = g.sum_rows(sq)?;
                let norm = g.sqrt(norm)?;
                // Zero-norm messages divide by one instead and stay zero.
                let guard = g.value(norm).map(|v| if v == 0.0 { 1.0 } else { 0.0 });
                let guard = g.constant(guard);
                let norm = g.add(norm, guard)?;
                let norm = g.matmul(norm, ones)?;
                let unit = g.div(m, norm)?;
                let cos = g.block_gram(unit, unit, n)?;
                let weighted = g.mul(cos, w)?;
                let term = g.sum(weighted)?;
                acc = Some(accumulate(g, acc, term)?);
            }
        }
        Ok(acc)
    }

    /// One epoch: rollouts, loss, backward, one optimizer step. The graph
    /// rejects any non-finite value, so a diverging epoch surfaces as an
    /// error before the parameters or the epoch counter change.
    pub fn train_epoch(&mut self) -> Result<EpochReport, TrainError> {
        let epoch = self.epoch + 1;
        let built = self.build_epoch(&self.params, epoch)?;
        let grads = built.graph.backward(built.total)?;
        let mut next = self.params.clone();
        next.accumulate(&grads)?;
        let mut optimizer = self.optimizer.clone();
        optimizer.step(&mut next, self.config.learning_rate)?;
        if next.iter().any(|a| !a.value.is_finite()) {
            return Err(GradError::NonFinite { node: built.total.index(), op: "update" }.into());
        }
        self.params = next;
        self.optimizer = optimizer;
        self.epoch = epoch;
        let eval_success = if self.config.eval_interval > 0 && epoch % self.config.eval_interval == 0 {
            Some(self.evaluate(self.config.eval_episodes, epoch as u64)?.success)
        } else {
            None
        };
        Ok(EpochReport { stats: built.stats, losses: built.losses, eval_success, topologies: built.topologies })
    }

    /// Greedy decentralized execution with the evaluation round count.
    pub fn evaluate(&self, episodes: usize, tag: u64) -> Result<EpochStats, TrainError> {
        evaluate(
            &self.protocol,
            &self.params,
            &self.env,
            self.config.eval_rounds(&self.protocol.spec),
            episodes,
            self.config.seed,
            tag,
            self.config.success_floor,
        )
    }
}

fn accumulate(g: &mut Graph, acc: Option<NodeId>, term: NodeId) -> Result<NodeId, GradError> {
    match acc {
        Some(a) => g.add(a, term),
        None => Ok(term),
    }
}

/// Runs `episodes` episodes with frozen parameters, every agent acting on
/// its own through [`run_decentralized`], and summarizes them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    protocol: &Protocol,
    params: &ParamStore,
    env: &EnvConfig,
    rounds: usize,
    episodes: usize,
    seed: u64,
    tag: u64,
    floor: f64,
) -> Result<EpochStats, TrainError> {
    protocol.check_params(params)?;
    let mut tally = RoundTally::default();
    let mut successes = 0usize;
    // Execution mode draws nothing; the generator only satisfies the signature.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for ep in 0..episodes {
        let mut e = env.build()?;
        let mut obs = e.reset(substream(seed, &[TAG_EVAL, tag, ep as u64]).gen());
        let mut failures = 0;
        loop {
            let step = run_decentralized(protocol, params, &obs, rounds, &mut unused, Mode::Execution)?;
            step.rounds.iter().for_each(|r| tally.push(r));
            let (next, res) = e.step(&step.actions)?;
            failures += res.failures;
            obs = next;
            if res.done {
                break;
            }
        }
        if failures == 0 {
            successes += 1;
        }
    }
    let success = if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 };
    Ok(EpochStats::from_tally(tag as usize, success, &tally, floor)?)
}
