//! The L-round communication engine.
//!
//! Each round every agent encodes its hidden state into a message, picks
//! whom to send it to, aggregates what it receives and updates its hidden
//! state with a GRU cell. After the last round a shared policy head maps
//! hidden states to action distributions.
//!
//! The centralized path stacks many independent `n`-agent groups (one per
//! episode) into single matrices and records everything on a [`Graph`] so
//! losses can be differentiated. The decentralized path in
//! [`decentralized`] runs the same computation agent by agent and exchanges
//! nothing but messages.

pub mod decentralized;

use crate::envs::Observation;
use crate::gradcore::{GradError, Graph, Matrix, NodeId, ParamArray, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    /// Everyone talks to everyone.
    Full,
    /// One learned broadcast gate per sender.
    Gated,
    /// Each sender keeps its `top_k` highest-scoring outgoing edges.
    AttentionTopk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationKind {
    Mean,
    Sum,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Identity,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    /// Defaults to `hidden_dim` when omitted from a config.
    #[serde(default)]
    pub message_dim: usize,
    #[serde(default = "defaults::topology")]
    pub topology: TopologyKind,
    #[serde(default = "defaults::aggregation")]
    pub aggregation: AggregationKind,
    #[serde(default = "defaults::message")]
    pub message: MessageKind,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    /// Communication ablation: no edges are ever formed, so every
    /// aggregated message is zero.
    #[serde(default)]
    pub silent: bool,
}

mod defaults {
    use super::*;
    pub fn rounds() -> usize {
        1
    }
    pub fn hidden_dim() -> usize {
        64
    }
    pub fn topology() -> TopologyKind {
        TopologyKind::Full
    }
    pub fn aggregation() -> AggregationKind {
        AggregationKind::Mean
    }
    pub fn message() -> MessageKind {
        MessageKind::Identity
    }
    pub fn top_k() -> usize {
        2
    }
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            rounds: defaults::rounds(),
            hidden_dim: defaults::hidden_dim(),
            message_dim: defaults::hidden_dim(),
            topology: defaults::topology(),
            aggregation: defaults::aggregation(),
            message: defaults::message(),
            top_k: defaults::top_k(),
            silent: false,
        }
    }
}

impl ProtocolSpec {
    /// CommNet-like: identity messages, full topology, mean aggregation.
    pub fn commnet(hidden_dim: usize) -> Self {
        Self { hidden_dim, message_dim: hidden_dim, ..Self::default() }
    }

    /// IC3Net-like: identity messages behind a learned broadcast gate.
    pub fn ic3net(hidden_dim: usize) -> Self {
        Self { topology: TopologyKind::Gated, ..Self::commnet(hidden_dim) }
    }

    /// TarMAC-like: linear messages, sparse top-k edges, attention aggregation.
    pub fn tarmac(hidden_dim: usize, message_dim: usize, top_k: usize) -> Self {
        Self {
            message_dim,
            topology: TopologyKind::AttentionTopk,
            aggregation: AggregationKind::Attention,
            message: MessageKind::Linear,
            top_k,
            ..Self::commnet(hidden_dim)
        }
    }

    /// Fills `message_dim` from `hidden_dim` when it was left unset.
    pub fn normalized(mut self) -> Self {
        if self.message_dim == 0 {
            self.message_dim = self.hidden_dim;
        }
        self
    }

    pub fn validate(&self, n_agents: usize) -> Vec<ProtocolError> {
        let mut errs = Vec::new();
        let mut bad = |field, reason: String| errs.push(ProtocolError::InvalidSpec { field, reason });
        if self.hidden_dim == 0 {
            bad("hidden_dim", "must be positive".into());
        }
        if self.message_dim == 0 {
            bad("message_dim", "must be positive".into());
        }
        if self.message == MessageKind::Identity && self.message_dim != self.hidden_dim {
            bad(
                "message_dim",
                format!("identity messages need message_dim = hidden_dim ({}), got {}", self.hidden_dim, self.message_dim),
            );
        }
        if self.topology == TopologyKind::AttentionTopk && self.top_k >= n_agents {
            errs.push(ProtocolError::TopK { k: self.top_k, n: n_agents });
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid protocol spec: `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("top-k topology needs k < number of agents, got k={k} with {n} agents")]
    TopK { k: usize, n: usize },
    #[error("observation for agent {agent} has length {got}, expected {expected}")]
    ObservationLength { agent: usize, expected: usize, got: usize },
    #[error("expected {expected} observations, got {got}")]
    ObservationCount { expected: usize, got: usize },
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, spec requires {expected:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub mod names {
    pub const OBS_W: &str = "obs.w";
    pub const OBS_B: &str = "obs.b";
    pub const MSG_W: &str = "msg.w";
    pub const MSG_B: &str = "msg.b";
    pub const TOPO_W: &str = "topo.w";
    pub const TOPO_B: &str = "topo.b";
    pub const AGGR_Q: &str = "aggr.q";
    pub const AGGR_K: &str = "aggr.k";
    pub const HSU_WX: &str = "hsu.wx";
    pub const HSU_WH: &str = "hsu.wh";
    pub const HSU_BX: &str = "hsu.bx";
    pub const HSU_BH: &str = "hsu.bh";
    pub const PI_W: &str = "pi.w";
    pub const PI_B: &str = "pi.b";
    pub const Q_W: &str = "q.w";
    pub const Q_B: &str = "q.b";
}

use names::*;

/// Large negative logit used to exclude non-neighbors from attention.
const MASKED: f64 = -1e30;

/// Which rows of a stacked batch are live agents; rows come in groups of `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Roster {
    pub n: usize,
    pub active: Vec<bool>,
}

impl Roster {
    pub fn new(n: usize, active: Vec<bool>) -> Self {
        assert!(n > 0 && active.len() % n == 0, "roster length must be a multiple of n");
        Self { n, active }
    }

    pub fn all_active(n: usize, groups: usize) -> Self {
        Self::new(n, vec![true; n * groups])
    }

    pub fn groups(&self) -> usize {
        self.active.len() / self.n
    }

    pub fn rows(&self) -> usize {
        self.active.len()
    }

    /// `mask[g*n+i, j] = 1` iff `i != j` and both agents are live.
    pub fn edge_mask(&self) -> Matrix {
        let n = self.n;
        let mut m = Matrix::zeros(self.rows(), n);
        for r in 0..self.rows() {
            let (base, i) = ((r / n) * n, r % n);
            if !self.active[r] {
                continue;
            }
            for j in 0..n {
                if j != i && self.active[base + j] {
                    m.set(r, j, 1.0);
                }
            }
        }
        m
    }
}

/// Chosen edges of one round: `hard` holds the binary sender-major matrix
/// (`G[i,j] = 1` means `i` sends to `j`), `node` the same values on the graph
/// with a straight-through gradient path where the topology is learned.
#[derive(Clone, Debug)]
pub struct Topology {
    pub node: NodeId,
    pub hard: Matrix,
}

#[derive(Clone, Debug)]
pub struct RoundNodes {
    pub hidden_in: NodeId,
    pub pre_messages: NodeId,
    pub topology: Topology,
    pub messages: NodeId,
    /// Receiver-major attention weights, `alpha[i, j]` for message `j -> i`.
    pub attention: Option<NodeId>,
    pub hidden: NodeId,
}

#[derive(Clone, Debug)]
pub struct StepNodes {
    pub hidden: NodeId,
    pub rounds: Vec<RoundNodes>,
    pub logits: NodeId,
    pub log_probs: NodeId,
}

/// Snapshot of one communication round for one `n`-agent group.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    /// Hidden states after the round's update.
    pub hidden: Matrix,
    /// Sent messages `m*`.
    pub pre_messages: Matrix,
    /// Aggregated messages `m` each agent consumed.
    pub messages: Matrix,
    pub topology: Matrix,
    pub attention: Option<Matrix>,
    pub active: Vec<bool>,
}

/// Parameter leaves of one graph, by name.
#[derive(Clone, Debug, Default)]
pub struct Leaves(HashMap<String, NodeId>);

impl Leaves {
    pub fn get(&self, name: &str) -> NodeId {
        *self.0.get(name).unwrap_or_else(|| panic!("parameter leaf `{name}` not created"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub spec: ProtocolSpec,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
}

impl Protocol {
    pub fn new(spec: ProtocolSpec, n_agents: usize, obs_dim: usize, n_actions: usize) -> Result<Self, ProtocolError> {
        let spec = spec.normalized();
        if let Some(e) = spec.validate(n_agents).into_iter().next() {
            return Err(e);
        }
        Ok(Self { spec, n_agents, obs_dim, n_actions })
    }

    /// `(name, shape, fan_in)` of every parameter this spec uses.
    pub fn param_layout(&self) -> Vec<(&'static str, (usize, usize), usize)> {
        let (h, d, n, a, o) = (self.spec.hidden_dim, self.spec.message_dim, self.n_agents, self.n_actions, self.obs_dim);
        let mut v = vec![(OBS_W, (o, h), o), (OBS_B, (1, h), o)];
        if self.spec.message == MessageKind::Linear {
            v.push((MSG_W, (h, d), h));
            v.push((MSG_B, (1, d), h));
        }
        match self.spec.topology {
            TopologyKind::Full => {}
            TopologyKind::Gated => {
                v.push((TOPO_W, (h, 1), h));
                v.push((TOPO_B, (1, 1), h));
            }
            TopologyKind::AttentionTopk => {
                v.push((TOPO_W, (h, n), h));
                v.push((TOPO_B, (1, n), h));
            }
        }
        if self.spec.aggregation == AggregationKind::Attention {
            v.push((AGGR_Q, (h, d), h));
            v.push((AGGR_K, (d, d), d));
        }
        v.extend([
            (HSU_WX, (d, 3 * h), h),
            (HSU_WH, (h, 3 * h), h),
            (HSU_BX, (1, 3 * h), h),
            (HSU_BH, (1, 3 * h), h),
            (PI_W, (h, a), h),
            (PI_B, (1, a), h),
            (Q_W, (n * h, n), n * h),
            (Q_B, (1, n), n * h),
        ]);
        v
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, (r, c), fan_in) in self.param_layout() {
            store.insert(ParamArray::uniform(name, r, c, fan_in, rng));
        }
        store
    }

    /// Checks that `params` holds exactly the arrays this spec needs.
    pub fn check_params(&self, params: &ParamStore) -> Result<(), ProtocolError> {
        for (name, shape, _) in self.param_layout() {
            let a = params.get(name).ok_or_else(|| ProtocolError::MissingParam(name.to_string()))?;
            if a.value.shape() != shape {
                return Err(ProtocolError::ParamShape { name: name.to_string(), expected: shape, got: a.value.shape() });
            }
        }
        Ok(())
    }

    pub fn leaves(&self, g: &mut Graph, params: &ParamStore) -> Leaves {
        let mut map = HashMap::new();
        for (name, _, _) in self.param_layout() {
            map.insert(name.to_string(), params.leaf(g, name));
        }
        Leaves(map)
    }

    /// Stacks per-agent observations into a matrix and returns which rows are live.
    pub fn observation_matrix(&self, obs: &[Observation]) -> Result<(Matrix, Vec<bool>), ProtocolError> {
        let mut data = Vec::with_capacity(obs.len() * self.obs_dim);
        for o in obs {
            if o.features.len() != self.obs_dim {
                return Err(ProtocolError::ObservationLength { agent: o.agent, expected: self.obs_dim, got: o.features.len() });
            }
            data.extend_from_slice(&o.features);
        }
        Ok((Matrix::from_vec(obs.len(), self.obs_dim, data), obs.iter().map(|o| o.active).collect()))
    }

    /// `h0 = tanh(o W + b)` with one encoder shared by every agent.
    pub fn encode_observations(&self, g: &mut Graph, p: &Leaves, obs: NodeId) -> Result<NodeId, ProtocolError> {
        let x = g.matmul(obs, p.get(OBS_W))?;
        let x = g.add_row(x, p.get(OBS_B))?;
        Ok(g.tanh(x)?)
    }

    pub fn encode_messages(&self, g: &mut Graph, p: &Leaves, h: NodeId) -> Result<NodeId, ProtocolError> {
        Ok(match self.spec.message {
            MessageKind::Identity => h,
            MessageKind::Linear => {
                let m = g.matmul(h, p.get(MSG_W))?;
                g.add_row(m, p.get(MSG_B))?
            }
        })
    }

    pub fn select_topology<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Leaves,
        h: NodeId,
        roster: &Roster,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Topology, ProtocolError> {
        let n = roster.n;
        let mask = roster.edge_mask();
        if self.spec.silent {
            let hard = Matrix::zeros(roster.rows(), n);
            return Ok(Topology { node: g.constant(hard.clone()), hard });
        }
        match self.spec.topology {
            TopologyKind::Full => Ok(Topology { node: g.constant(mask.clone()), hard: mask }),
            TopologyKind::Gated => {
                let logit = g.matmul(h, p.get(TOPO_W))?;
                let logit = g.add_row(logit, p.get(TOPO_B))?;
                let gate = g.sigmoid(logit)?;
                let probs = g.value(gate).clone();
                // Only live agents draw, so sampling stays in step with the
                // decentralized path.
                let open = Matrix::from_vec(
                    probs.rows(),
                    1,
                    (0..probs.rows())
                        .map(|r| f64::from(u8::from(roster.active[r] && gate_open(probs.get(r, 0), rng, mode))))
                        .collect(),
                );
                let gate = g.straight_through(gate, open)?;
                let ones = g.constant(Matrix::filled(1, n, 1.0));
                let rows = g.matmul(gate, ones)?;
                let mask_node = g.constant(mask);
                let node = g.mul(rows, mask_node)?;
                let hard = g.value(node).clone();
                Ok(Topology { node, hard })
            }
            TopologyKind::AttentionTopk => {
                let scores = g.matmul(h, p.get(TOPO_W))?;
                let scores = g.add_row(scores, p.get(TOPO_B))?;
                let soft = g.sigmoid(scores)?;
                let mut picks = Matrix::zeros(roster.rows(), n);
                for r in 0..roster.rows() {
                    for j in top_k_edges(g.value(scores).row(r), r % n, self.spec.top_k) {
                        picks.set(r, j, 1.0);
                    }
                }
                let st = g.straight_through(soft, picks)?;
                let mask_node = g.constant(mask);
                let node = g.mul(st, mask_node)?;
                let hard = g.value(node).clone();
                Ok(Topology { node, hard })
            }
        }
    }

    /// Returns the aggregated messages and, for attention, the receiver-major
    /// attention weights.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        p: &Leaves,
        h: NodeId,
        pre_messages: NodeId,
        topology: &Topology,
        roster: &Roster,
    ) -> Result<(NodeId, Option<NodeId>), ProtocolError> {
        let n = roster.n;
        // Receiver-major: incoming[i, j] = G[j, i].
        let incoming = g.block_transpose(topology.node, n)?;
        let incoming_hard = crate::gradcore::block_transpose(&topology.hard, n);
        match self.spec.aggregation {
            AggregationKind::Sum => Ok((g.block_mix(incoming, pre_messages, n)?, None)),
            AggregationKind::Mean => {
                let mut scale = Matrix::zeros(roster.rows(), n);
                for r in 0..roster.rows() {
                    let inv = inverse_degree(incoming_hard.row(r));
                    scale.row_mut(r).iter_mut().for_each(|v| *v = inv);
                }
                let scale = g.constant(scale);
                let weights = g.mul(incoming, scale)?;
                Ok((g.block_mix(weights, pre_messages, n)?, None))
            }
            AggregationKind::Attention => {
                let q = g.matmul(h, p.get(AGGR_Q))?;
                let k = g.matmul(pre_messages, p.get(AGGR_K))?;
                let logits = g.block_gram(q, k, n)?;
                let logits = g.scale(logits, attention_scale(self.spec.message_dim))?;
                let mask = g.constant(incoming_hard.map(|v| if v > 0.0 { 0.0 } else { MASKED }));
                let logits = g.add(logits, mask)?;
                let alpha = g.softmax(logits)?;
                let alpha = g.mul(alpha, incoming)?;
                Ok((g.block_mix(alpha, pre_messages, n)?, Some(alpha)))
            }
        }
    }

    /// GRU cell with the aggregated message as input:
    /// `h' = (1 - z) * h + z * n`.
    pub fn update_hidden(&self, g: &mut Graph, p: &Leaves, h: NodeId, m: NodeId) -> Result<NodeId, ProtocolError> {
        let hd = self.spec.hidden_dim;
        let gx = g.matmul(m, p.get(HSU_WX))?;
        let gx = g.add_row(gx, p.get(HSU_BX))?;
        let gh = g.matmul(h, p.get(HSU_WH))?;
        let gh = g.add_row(gh, p.get(HSU_BH))?;
        let (xr, xz, xn) = (g.slice_cols(gx, 0, hd)?, g.slice_cols(gx, hd, 2 * hd)?, g.slice_cols(gx, 2 * hd, 3 * hd)?);
        let (hr, hz, hn) = (g.slice_cols(gh, 0, hd)?, g.slice_cols(gh, hd, 2 * hd)?, g.slice_cols(gh, 2 * hd, 3 * hd)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let rh = g.mul(r, hn)?;
        let cand = g.add(xn, rh)?;
        let cand = g.tanh(cand)?;
        let rows = g.value(h).rows();
        let ones = g.constant(Matrix::filled(rows, hd, 1.0));
        let keep = g.sub(ones, z)?;
        let kept = g.mul(keep, h)?;
        let fresh = g.mul(z, cand)?;
        Ok(g.add(kept, fresh)?)
    }

    /// Applies `rounds` communication rounds starting from `h0`. The topology
    /// of each round is chosen from the hidden states the previous round produced.
    pub fn run_rounds<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Leaves,
        h0: NodeId,
        rounds: usize,
        roster: &Roster,
        rng: &mut R,
        mode: Mode,
    ) -> Result<(NodeId, Vec<RoundNodes>), ProtocolError> {
        let mut h = h0;
        let mut log = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let pre_messages = self.encode_messages(g, p, h)?;
            let topology = self.select_topology(g, p, h, roster, rng, mode)?;
            let (messages, attention) = self.aggregate(g, p, h, pre_messages, &topology, roster)?;
            let next = self.update_hidden(g, p, h, messages)?;
            log.push(RoundNodes { hidden_in: h, pre_messages, topology, messages, attention, hidden: next });
            h = next;
        }
        Ok((h, log))
    }

    pub fn logits(&self, g: &mut Graph, p: &Leaves, h: NodeId) -> Result<NodeId, ProtocolError> {
        let logits = g.matmul(h, p.get(PI_W))?;
        Ok(g.add_row(logits, p.get(PI_B))?)
    }

    /// Samples (training) or takes the lowest-index argmax (execution) for
    /// every live row; inactive rows get `None`.
    pub fn act<R: Rng + ?Sized>(&self, log_probs: &Matrix, roster: &Roster, rng: &mut R, mode: Mode) -> Vec<Option<usize>> {
        (0..log_probs.rows())
            .map(|r| {
                roster.active[r].then(|| match mode {
                    Mode::Execution => greedy(log_probs.row(r)),
                    Mode::Training => sample(log_probs.row(r), rng),
                })
            })
            .collect()
    }

    /// Per-agent state values from the concatenation of every agent's final
    /// hidden state in the group.
    pub fn critic(&self, g: &mut Graph, p: &Leaves, h: NodeId, groups: usize) -> Result<NodeId, ProtocolError> {
        let n = self.n_agents;
        let flat = g.reshape(h, groups, n * self.spec.hidden_dim)?;
        let v = g.matmul(flat, p.get(Q_W))?;
        let v = g.add_row(v, p.get(Q_B))?;
        Ok(g.reshape(v, groups * n, 1)?)
    }

    /// Full per-step pass on an existing graph: encode, communicate for
    /// `rounds` rounds, and evaluate the policy head.
    pub fn step_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Leaves,
        obs: Matrix,
        rounds: usize,
        roster: &Roster,
        rng: &mut R,
        mode: Mode,
    ) -> Result<StepNodes, ProtocolError> {
        let obs = g.constant(obs);
        let h0 = self.encode_observations(g, p, obs)?;
        let (hidden, rounds) = self.run_rounds(g, p, h0, rounds, roster, rng, mode)?;
        let logits = self.logits(g, p, hidden)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepNodes { hidden, rounds, logits, log_probs })
    }

    /// Splits recorded rounds into per-group snapshots, round-major.
    pub fn round_states(&self, g: &Graph, rounds: &[RoundNodes], roster: &Roster) -> Vec<RoundState> {
        let n = roster.n;
        let mut out = Vec::with_capacity(rounds.len() * roster.groups());
        for round in rounds {
            let (hid, pre, msg) = (g.value(round.hidden), g.value(round.pre_messages), g.value(round.messages));
            let att = round.attention.map(|a| g.value(a));
            for grp in 0..roster.groups() {
                let (s, e) = (grp * n, (grp + 1) * n);
                out.push(RoundState {
                    hidden: hid.row_block(s, e),
                    pre_messages: pre.row_block(s, e),
                    messages: msg.row_block(s, e),
                    topology: round.topology.hard.row_block(s, e),
                    attention: att.map(|a| a.row_block(s, e)),
                    active: roster.active[s..e].to_vec(),
                });
            }
        }
        out
    }
}

pub(crate) fn gate_open<R: Rng + ?Sized>(prob: f64, rng: &mut R, mode: Mode) -> bool {
    match mode {
        Mode::Training => rng.gen::<f64>() < prob,
        Mode::Execution => prob >= 0.5,
    }
}

/// The `k` highest scores of `row`, skipping `own`; ties go to the lower index.
pub(crate) fn top_k_edges(row: &[f64], own: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != own).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub(crate) fn inverse_degree(incoming: &[f64]) -> f64 {
    let deg = incoming.iter().filter(|&&v| v > 0.0).count();
    if deg == 0 {
        0.0
    } else {
        1.0 / deg as f64
    }
}

pub(crate) fn attention_scale(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

pub fn greedy(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}
