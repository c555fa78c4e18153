//! Per-agent execution. Each [`LocalAgent`] holds only its own hidden state
//! and a read-only view of the shared parameters; the only thing that
//! crosses agent boundaries is an [`Envelope`] carrying a sent message.
//!
//! Every arithmetic step mirrors the batched graph path operation for
//! operation, so both paths produce bitwise identical results.

use super::{
    attention_scale, gate_open, greedy, inverse_degree, names::*, sample, top_k_edges, AggregationKind, MessageKind, Mode,
    Protocol, ProtocolError, RoundState, TopologyKind, MASKED,
};
use crate::envs::Observation;
use crate::gradcore::{mix_row, sigmoid, softmax_in_place, Matrix, ParamStore};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub from: usize,
    pub payload: Vec<f64>,
}

pub struct LocalAgent<'a> {
    protocol: &'a Protocol,
    params: &'a ParamStore,
    pub id: usize,
    pub hidden: Matrix,
}

/// What one agent did with its inbox in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Received {
    pub message: Vec<f64>,
    /// Weight per sender slot, zero for agents that did not send.
    pub attention: Option<Vec<f64>>,
}

impl<'a> LocalAgent<'a> {
    pub fn new(protocol: &'a Protocol, params: &'a ParamStore, id: usize, features: &[f64]) -> Result<Self, ProtocolError> {
        if features.len() != protocol.obs_dim {
            return Err(ProtocolError::ObservationLength { agent: id, expected: protocol.obs_dim, got: features.len() });
        }
        protocol.check_params(params)?;
        let hidden = Matrix::row_vector(features)
            .matmul(params.value(OBS_W))
            .add_row(params.value(OBS_B))
            .map(f64::tanh);
        Ok(Self { protocol, params, id, hidden })
    }

    fn p(&self, name: &str) -> &'a Matrix {
        self.params.value(name)
    }

    /// The message this agent broadcasts this round.
    pub fn compose(&self) -> Vec<f64> {
        match self.protocol.spec.message {
            MessageKind::Identity => self.hidden.data().to_vec(),
            MessageKind::Linear => self.hidden.matmul(self.p(MSG_W)).add_row(self.p(MSG_B)).into_vec(),
        }
    }

    /// Agents this one sends to, in index order. `live` lists which slots
    /// are currently occupied.
    pub fn recipients<R: Rng + ?Sized>(&self, live: &[bool], rng: &mut R, mode: Mode) -> Vec<usize> {
        let others = |keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
            (0..live.len()).filter(|&j| j != self.id && live[j] && keep(j)).collect()
        };
        if self.protocol.spec.silent {
            return Vec::new();
        }
        match self.protocol.spec.topology {
            TopologyKind::Full => others(&|_| true),
            TopologyKind::Gated => {
                let logit = self.hidden.matmul(self.p(TOPO_W)).add_row(self.p(TOPO_B));
                if gate_open(sigmoid(logit.get(0, 0)), rng, mode) {
                    others(&|_| true)
                } else {
                    Vec::new()
                }
            }
            TopologyKind::AttentionTopk => {
                let scores = self.hidden.matmul(self.p(TOPO_W)).add_row(self.p(TOPO_B));
                let picked = top_k_edges(scores.row(0), self.id, self.protocol.spec.top_k);
                others(&|j| picked.contains(&j))
            }
        }
    }

    /// Aggregates an inbox sorted by sender.
    pub fn receive(&self, inbox: &[Envelope]) -> Received {
        let n = self.protocol.n_agents;
        let d = self.protocol.spec.message_dim;
        debug_assert!(inbox.windows(2).all(|w| w[0].from < w[1].from));
        let mut slot: Vec<Option<&[f64]>> = vec![None; n];
        for e in inbox {
            slot[e.from] = Some(&e.payload);
        }
        let indicator: Vec<f64> = slot.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect();
        let (weights, attention) = match self.protocol.spec.aggregation {
            AggregationKind::Sum => (indicator, None),
            AggregationKind::Mean => {
                let inv = inverse_degree(&indicator);
                (indicator.iter().map(|v| v * inv).collect(), None)
            }
            AggregationKind::Attention => {
                let q = self.hidden.matmul(self.p(AGGR_Q));
                let scale = attention_scale(d);
                let mut logits: Vec<f64> = slot
                    .iter()
                    .map(|s| match s {
                        Some(payload) => {
                            let k = Matrix::row_vector(payload).matmul(self.p(AGGR_K));
                            crate::gradcore::dot(q.row(0), k.row(0)) * scale + 0.0
                        }
                        None => MASKED,
                    })
                    .collect();
                softmax_in_place(&mut logits);
                let alpha: Vec<f64> = logits.iter().zip(&indicator).map(|(a, i)| a * i).collect();
                (alpha.clone(), Some(alpha))
            }
        };
        let mut message = vec![0.0; d];
        mix_row(&weights, |j| slot[j].expect("nonzero weight without a message"), &mut message);
        Received { message, attention }
    }

    /// GRU update of the hidden state with the aggregated message.
    pub fn update(&mut self, message: &[f64]) {
        let hd = self.protocol.spec.hidden_dim;
        let gx = Matrix::row_vector(message).matmul(self.p(HSU_WX)).add_row(self.p(HSU_BX));
        let gh = self.hidden.matmul(self.p(HSU_WH)).add_row(self.p(HSU_BH));
        let part = |m: &Matrix, k: usize| m.slice_cols(k * hd, (k + 1) * hd);
        let r = part(&gx, 0).zip_map(&part(&gh, 0), |a, b| a + b).map(sigmoid);
        let z = part(&gx, 1).zip_map(&part(&gh, 1), |a, b| a + b).map(sigmoid);
        let rh = r.zip_map(&part(&gh, 2), |a, b| a * b);
        let cand = part(&gx, 2).zip_map(&rh, |a, b| a + b).map(f64::tanh);
        let keep = z.map(|v| 1.0 - v);
        let kept = keep.zip_map(&self.hidden, |a, b| a * b);
        let fresh = z.zip_map(&cand, |a, b| a * b);
        self.hidden = kept.zip_map(&fresh, |a, b| a + b);
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.hidden.matmul(self.p(PI_W)).add_row(self.p(PI_B)).log_softmax_rows().into_vec()
    }

    pub fn act<R: Rng + ?Sized>(&self, rng: &mut R, mode: Mode) -> usize {
        let lp = self.log_probs();
        match mode {
            Mode::Execution => greedy(&lp),
            Mode::Training => sample(&lp, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecentralizedStep {
    pub actions: Vec<Option<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    pub rounds: Vec<RoundState>,
}

/// Runs one environment step with every agent computing on its own and a
/// message router in between. Inactive slots still keep a hidden state but
/// neither send nor receive, and produce no action.
pub fn run_decentralized<R: Rng + ?Sized>(
    protocol: &Protocol,
    params: &ParamStore,
    obs: &[Observation],
    rounds: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<DecentralizedStep, ProtocolError> {
    let n = protocol.n_agents;
    if obs.len() != n {
        return Err(ProtocolError::ObservationCount { expected: n, got: obs.len() });
    }
    let live: Vec<bool> = obs.iter().map(|o| o.active).collect();
    let mut agents =
        obs.iter().enumerate().map(|(i, o)| LocalAgent::new(protocol, params, i, &o.features)).collect::<Result<Vec<_>, _>>()?;
    let mut states = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let outgoing: Vec<Vec<f64>> = agents.iter().map(|a| a.compose()).collect();
        let mut topology = Matrix::zeros(n, n);
        for (i, a) in agents.iter().enumerate() {
            if !live[i] {
                continue;
            }
            for j in a.recipients(&live, rng, mode) {
                topology.set(i, j, 1.0);
            }
        }
        let mut messages = Matrix::zeros(n, protocol.spec.message_dim);
        let mut attention = Matrix::zeros(n, n);
        for (i, a) in agents.iter_mut().enumerate() {
            let inbox: Vec<Envelope> = (0..n)
                .filter(|&j| topology.get(j, i) > 0.0)
                .map(|j| Envelope { from: j, payload: outgoing[j].clone() })
                .collect();
            let got = a.receive(&inbox);
            if let Some(alpha) = &got.attention {
                attention.row_mut(i).copy_from_slice(alpha);
            }
            messages.row_mut(i).copy_from_slice(&got.message);
            a.update(&got.message);
        }
        let mut hidden = Matrix::zeros(n, protocol.spec.hidden_dim);
        for (i, a) in agents.iter().enumerate() {
            hidden.row_mut(i).copy_from_slice(a.hidden.row(0));
        }
        states.push(RoundState {
            hidden,
            pre_messages: Matrix::from_rows(&outgoing),
            messages,
            topology,
            attention: (protocol.spec.aggregation == AggregationKind::Attention).then_some(attention),
            active: live.clone(),
        });
    }
    let log_probs: Vec<Vec<f64>> = agents.iter().map(|a| a.log_probs()).collect();
    let actions = agents
        .iter()
        .zip(&live)
        .map(|(a, &l)| {
            l.then(|| match mode {
                Mode::Execution => greedy(&log_probs[a.id]),
                Mode::Training => sample(&log_probs[a.id], rng),
            })
        })
        .collect();
    Ok(DecentralizedStep { actions, log_probs, rounds: states })
}
