//! Cloud-side aggregation: clean the admitted updates, recover their sum from
//! masked payloads, weight by sample count, optionally add global noise.
//!
//! The secure path never sees an unmasked [`GradientUpdate`]: [`smpc_sum`]
//! takes [`MaskedUpdate`]s only. Nodes pre-weight their delta by
//! `n_k / N_round` before masking, so the recovered sum is already the
//! FedAvg delta.
//!
//! [`GradientUpdate`]: crate::model::GradientUpdate

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::masking::MaskedUpdate;
use crate::model::{ModelError, ModelParams};
use crate::privacy::{add_noise_vec, clip_vector, gaussian_sigma, PrivacyError};
use crate::telemetry::NodeId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("every update was dropped during preprocessing")]
    AllDropped(Vec<DropRecord>),
    #[error("participant set mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    ParticipantMismatch {
        missing: Vec<NodeId>,
        unexpected: Vec<NodeId>,
    },
    #[error("update from {0} appears more than once")]
    Duplicate(NodeId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("aggregate is not finite")]
    NonFinite,
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonFinite,
    Dimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub node_id: NodeId,
    pub reason: DropReason,
}

/// The aggregated model `M_C` for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalUpdate {
    pub params: ModelParams,
    /// `params - base`, weights then bias.
    pub delta: Vec<f64>,
    pub contributing_nodes: Vec<NodeId>,
    pub total_samples: u64,
    pub round: u64,
    /// `f64::INFINITY` when no global noise was added.
    pub epsilon_global: f64,
}

/// Drops non-finite and wrongly sized payloads; the survivors come back
/// sorted by node id. `dim` is the payload length (features plus bias).
pub fn preprocess_updates(
    admitted: &[MaskedUpdate],
    dim: usize,
) -> Result<(Vec<MaskedUpdate>, Vec<DropRecord>), AggregationError> {
    if admitted.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut kept = Vec::with_capacity(admitted.len());
    let mut dropped = Vec::new();
    for u in admitted {
        let reason = if u.payload.len() != dim {
            Some(DropReason::Dimension)
        } else if !u.is_finite() {
            Some(DropReason::NonFinite)
        } else {
            None
        };
        match reason {
            Some(reason) => dropped.push(DropRecord {
                node_id: u.node_id.clone(),
                reason,
            }),
            None => kept.push(u.clone()),
        }
    }
    if kept.is_empty() {
        return Err(AggregationError::AllDropped(dropped));
    }
    kept.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    Ok((kept, dropped))
}

/// Coordinate-wise sum of masked payloads. Masks cancel only over the full
/// participant set the round's masks were derived for, so anything else is
/// refused.
pub fn smpc_sum(masked: &[MaskedUpdate], participants: &[NodeId]) -> Result<Vec<f64>, AggregationError> {
    let first = masked.first().ok_or(AggregationError::Empty)?;
    let mut got = BTreeSet::new();
    for u in masked {
        if !got.insert(u.node_id.as_str()) {
            return Err(AggregationError::Duplicate(u.node_id.clone()));
        }
    }
    let want: BTreeSet<&str> = participants.iter().map(String::as_str).collect();
    if got != want {
        return Err(AggregationError::ParticipantMismatch {
            missing: want.difference(&got).map(|s| s.to_string()).collect(),
            unexpected: got.difference(&want).map(|s| s.to_string()).collect(),
        });
    }
    let dim = first.payload.len();
    let mut sum = vec![0.0; dim];
    for u in masked {
        if u.payload.len() != dim {
            return Err(AggregationError::Dimension {
                expected: dim,
                got: u.payload.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(&u.payload) {
            *s += v;
        }
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(AggregationError::NonFinite);
    }
    Ok(sum)
}

/// One node's contribution to a plain (unmasked) FedAvg.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDelta {
    pub node_id: NodeId,
    pub delta: Vec<f64>,
    pub n_samples: u64,
}

/// `base + Σ (n_k / Σn) δ_k`, version bumped by one.
pub fn fedavg(updates: &[WeightedDelta], base: &ModelParams, round: u64) -> Result<GlobalUpdate, AggregationError> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    let total: u64 = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(AggregationError::ZeroSamples);
    }
    let dim = base.dim() + 1;
    let mut delta = vec![0.0; dim];
    for u in updates {
        if u.delta.len() != dim {
            return Err(AggregationError::Dimension {
                expected: dim,
                got: u.delta.len(),
            });
        }
        let w = u.n_samples as f64 / total as f64;
        for (d, v) in delta.iter_mut().zip(&u.delta) {
            *d += w * v;
        }
    }
    let mut nodes: Vec<NodeId> = updates.iter().map(|u| u.node_id.clone()).collect();
    nodes.sort();
    global_from_delta(base, delta, nodes, total, round)
}

/// Builds the global update from an already-weighted aggregate delta, as
/// recovered by [`smpc_sum`].
pub fn global_from_delta(
    base: &ModelParams,
    delta: Vec<f64>,
    contributing_nodes: Vec<NodeId>,
    total_samples: u64,
    round: u64,
) -> Result<GlobalUpdate, AggregationError> {
    if contributing_nodes.is_empty() {
        return Err(AggregationError::Empty);
    }
    if total_samples == 0 {
        return Err(AggregationError::ZeroSamples);
    }
    let mut params = base.with_delta(&delta)?;
    if !params.is_finite() {
        return Err(AggregationError::NonFinite);
    }
    params.version = base.version + 1;
    Ok(GlobalUpdate {
        params,
        delta,
        contributing_nodes,
        total_samples,
        round,
        epsilon_global: f64::INFINITY,
    })
}

/// Clips the aggregate delta to `clip_global` and adds Gaussian noise with
/// the same calibration as the local mechanism. Infinite epsilon is the
/// identity.
pub fn privacy_adjust_global(
    g: &GlobalUpdate,
    epsilon_global: f64,
    delta: f64,
    clip_global: f64,
    rng_seed: u64,
) -> Result<GlobalUpdate, AggregationError> {
    let sigma = gaussian_sigma(clip_global, delta, epsilon_global)?;
    if !g.params.is_finite() {
        return Err(AggregationError::NonFinite);
    }
    if epsilon_global.is_infinite() {
        return Ok(g.clone());
    }
    let base: Vec<f64> = g.params.to_vector().iter().zip(&g.delta).map(|(p, d)| p - d).collect();
    let noised = add_noise_vec(&clip_vector(&g.delta, clip_global)?, sigma, rng_seed);
    let d = g.params.dim();
    let mut out = g.clone();
    out.params.weights = base[..d].iter().zip(&noised[..d]).map(|(b, n)| b + n).collect();
    out.params.bias = base[d] + noised[d];
    out.delta = noised;
    out.epsilon_global = epsilon_global;
    if !out.params.is_finite() {
        return Err(AggregationError::NonFinite);
    }
    Ok(out)
}
