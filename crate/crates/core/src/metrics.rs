//! Communication efficiency metrics.
//!
//! * IEI: message entropy per unit of success, `H / S'`.
//! * SEI: mean pairwise message similarity per unit of success, `xi / S'`.
//! * TEI: success per communication, `S / C`.
//!
//! `S' = max(S, floor)` keeps the ratios finite when nothing succeeds.
//! Entropy and similarity are measured on the messages agents send, counting
//! only agents that are alive in that round.

use crate::protocol::RoundState;
use serde::{Deserialize, Serialize};

/// Keeps the entropy normalization finite for all-zero messages.
pub const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no round with an active agent in this epoch")]
    EmptyEpoch,
    #[error("no round with at least two active agents in this epoch")]
    TooFewAgents,
    #[error("success rate {0} outside [0, 1]")]
    SuccessRange(f64),
}

/// Shannon entropy in bits of `|m| / (sum |m| + eps)`.
pub fn message_entropy(m: &[f64]) -> f64 {
    let total: f64 = m.iter().map(|v| v.abs()).sum::<f64>() + NORM_EPS;
    -m.iter()
        .map(|v| {
            let p = v.abs() / total;
            if p > 0.0 {
                p * p.log2()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

fn live_messages(r: &RoundState) -> Vec<&[f64]> {
    (0..r.pre_messages.rows()).filter(|&i| r.active[i]).map(|i| r.pre_messages.row(i)).collect()
}

/// Mean entropy over active agents of one round, `None` if nobody is alive.
pub fn round_entropy(r: &RoundState) -> Option<f64> {
    let live = live_messages(r);
    (!live.is_empty()).then(|| live.iter().map(|m| message_entropy(m)).sum::<f64>() / live.len() as f64)
}

/// Mean cosine over unordered pairs of active agents of one round, `None`
/// with fewer than two agents alive.
pub fn round_similarity(r: &RoundState) -> Option<f64> {
    let live = live_messages(r);
    if live.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..live.len() {
        for j in i + 1..live.len() {
            total += cosine(live[i], live[j]);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Directed edges `i -> j`, `i != j`.
pub fn round_comm_count(r: &RoundState) -> usize {
    let n = r.topology.rows();
    let mut c = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && r.topology.get(i, j) > 0.0 {
                c += 1;
            }
        }
    }
    c
}

/// Running totals over the rounds of an epoch, so callers need not keep
/// every round state alive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundTally {
    entropy_sum: f64,
    entropy_rounds: usize,
    similarity_sum: f64,
    similarity_rounds: usize,
    pub comm_count: usize,
}

impl RoundTally {
    pub fn push(&mut self, r: &RoundState) {
        if let Some(h) = round_entropy(r) {
            self.entropy_sum += h;
            self.entropy_rounds += 1;
        }
        if let Some(s) = round_similarity(r) {
            self.similarity_sum += s;
            self.similarity_rounds += 1;
        }
        self.comm_count += round_comm_count(r);
    }

    pub fn merge(&mut self, other: &RoundTally) {
        self.entropy_sum += other.entropy_sum;
        self.entropy_rounds += other.entropy_rounds;
        self.similarity_sum += other.similarity_sum;
        self.similarity_rounds += other.similarity_rounds;
        self.comm_count += other.comm_count;
    }

    pub fn entropy(&self) -> Result<f64, MetricsError> {
        if self.entropy_rounds == 0 {
            return Err(MetricsError::EmptyEpoch);
        }
        Ok(self.entropy_sum / self.entropy_rounds as f64)
    }

    pub fn similarity(&self) -> Result<f64, MetricsError> {
        if self.similarity_rounds == 0 {
            return Err(MetricsError::TooFewAgents);
        }
        Ok(self.similarity_sum / self.similarity_rounds as f64)
    }
}

fn tally(rounds: &[RoundState]) -> RoundTally {
    let mut t = RoundTally::default();
    rounds.iter().for_each(|r| t.push(r));
    t
}

pub fn epoch_entropy(rounds: &[RoundState]) -> Result<f64, MetricsError> {
    tally(rounds).entropy()
}

pub fn pairwise_similarity(rounds: &[RoundState]) -> Result<f64, MetricsError> {
    tally(rounds).similarity()
}

pub fn comm_count(rounds: &[RoundState]) -> usize {
    rounds.iter().map(round_comm_count).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cems {
    pub iei: f64,
    pub sei: f64,
    /// `None` when no communication happened.
    pub tei: Option<f64>,
}

pub fn compute_cems(success: f64, entropy: f64, similarity: f64, comm: usize, floor: f64) -> Result<Cems, MetricsError> {
    if !(0.0..=1.0).contains(&success) {
        return Err(MetricsError::SuccessRange(success));
    }
    let s = success.max(floor);
    Ok(Cems { iei: entropy / s, sei: similarity / s, tei: tei(success, comm) })
}

pub fn tei(success: f64, comm: usize) -> Option<f64> {
    (comm > 0).then(|| success / comm as f64)
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub success: f64,
    /// `None` when the epoch had no communication round (for example `L = 0`).
    pub entropy: Option<f64>,
    /// `None` when no round had two live agents.
    pub similarity: Option<f64>,
    pub comm_count: usize,
    pub iei: Option<f64>,
    pub sei: Option<f64>,
    pub tei: Option<f64>,
}

impl EpochStats {
    pub fn from_tally(epoch: usize, success: f64, tally: &RoundTally, floor: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&success) {
            return Err(MetricsError::SuccessRange(success));
        }
        let s = success.max(floor);
        let entropy = tally.entropy().ok();
        let similarity = tally.similarity().ok();
        Ok(Self {
            epoch,
            success,
            entropy,
            similarity,
            comm_count: tally.comm_count,
            iei: entropy.map(|h| h / s),
            sei: similarity.map(|x| x / s),
            tei: tei(success, tally.comm_count),
        })
    }
}
