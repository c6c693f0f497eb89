//! Dynamic pairwise masking.
//!
//! For every unordered pair of participants a shared pseudo-random vector is
//! derived from the round seed. The earlier participant adds it, the later one
//! subtracts it, so the masks of a full participant set sum to zero. Mask
//! entries are rounded to a 2^-32 grid, which keeps the cancellation exact in
//! f64 while partial sums stay below 2^21.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::FreshnessTag;
use crate::codec::{canonical_hash, DecodeError, Decoder, Digest, Encoder};
use crate::model::GradientUpdate;
use crate::seed;
use crate::telemetry::NodeId;

const GRID: f64 = 4_294_967_296.0; // 2^32

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("no participants")]
    NoParticipants,
    #[error("duplicate participant {0}")]
    Duplicate(NodeId),
    #[error("dimension mismatch: update has {update}, mask has {mask}")]
    Dimension { update: usize, mask: usize },
    #[error("mask strength must be positive and finite, got {0}")]
    Strength(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVector {
    pub node_id: NodeId,
    pub round: u64,
    pub values: Vec<f64>,
}

/// Mask scale for a round. Pairwise vectors are shared, so the scale must be
/// common to all participants; it is tied to the round's public norm bound.
pub fn round_strength(mask_strength: f64, norm_bound: f64) -> f64 {
    mask_strength * norm_bound.max(1.0)
}

fn pair_vector(round_seed: u64, a: &str, b: &str, dim: usize, strength: f64) -> Vec<f64> {
    let mut rng = seed::stream(round_seed, "mask-pair", &[seed::id_part(a), seed::id_part(b)]);
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (strength * z * GRID).round() / GRID
        })
        .collect()
}

pub fn derive_masks(
    round_seed: u64,
    round: u64,
    participants: &[NodeId],
    dim: usize,
    strength: f64,
) -> Result<BTreeMap<NodeId, MaskVector>, MaskError> {
    if participants.is_empty() {
        return Err(MaskError::NoParticipants);
    }
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(MaskError::Strength(strength));
    }
    let mut seen = BTreeSet::new();
    for p in participants {
        if !seen.insert(p.as_str()) {
            return Err(MaskError::Duplicate(p.clone()));
        }
    }

    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; dim]; participants.len()];
    for i in 0..participants.len() {
        for j in (i + 1)..participants.len() {
            let s = pair_vector(round_seed, &participants[i], &participants[j], dim, strength);
            for (k, v) in s.iter().enumerate() {
                acc[i][k] += v;
                acc[j][k] -= v;
            }
        }
    }
    Ok(participants
        .iter()
        .zip(acc)
        .map(|(id, values)| {
            (
                id.clone(),
                MaskVector {
                    node_id: id.clone(),
                    round,
                    values,
                },
            )
        })
        .collect())
}

/// What the edge stack declares alongside a masked payload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    /// Epsilon spent producing this update (`INFINITY` when noise is off).
    pub epsilon: f64,
    /// L2 norm of the clipped update before noise and sample weighting.
    pub update_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedUpdate {
    pub node_id: NodeId,
    pub round: u64,
    pub payload: Vec<f64>,
    pub n_samples: u64,
    pub declaration: Declaration,
    pub freshness: FreshnessTag,
    pub payload_hash: Digest,
}

impl MaskedUpdate {
    /// Canonical serialization of everything except the hash.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.node_id)
            .u64(self.round)
            .f64s(&self.payload)
            .u64(self.n_samples)
            .f64(self.declaration.epsilon)
            .f64(self.declaration.update_norm);
        self.freshness.encode_into(&mut e);
        e.finish()
    }

    pub fn compute_hash(&self) -> Digest {
        canonical_hash(&self.body_bytes())
    }

    pub fn hash_matches(&self) -> bool {
        self.compute_hash() == self.payload_hash
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(&self.body_bytes()).fixed(&self.payload_hash.0);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut outer = Decoder::new(bytes);
        let body = outer.bytes()?;
        let payload_hash = Digest(outer.fixed::<32>()?);
        outer.finish()?;
        let mut d = Decoder::new(body);
        let node_id = d.str()?;
        let round = d.u64()?;
        let payload = d.f64s()?;
        let n_samples = d.u64()?;
        let epsilon = d.f64()?;
        let update_norm = d.f64()?;
        let freshness = FreshnessTag::decode_from(&mut d)?;
        d.finish()?;
        Ok(Self {
            node_id,
            round,
            payload,
            n_samples,
            declaration: Declaration { epsilon, update_norm },
            freshness,
            payload_hash,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.payload.iter().all(|v| v.is_finite())
    }
}

pub fn apply_mask(
    update: &GradientUpdate,
    mask: &MaskVector,
    freshness: FreshnessTag,
    declaration: Declaration,
) -> Result<MaskedUpdate, MaskError> {
    if update.grad.len() != mask.values.len() {
        return Err(MaskError::Dimension {
            update: update.grad.len(),
            mask: mask.values.len(),
        });
    }
    let payload = update.grad.iter().zip(&mask.values).map(|(g, m)| g + m).collect();
    let mut out = MaskedUpdate {
        node_id: mask.node_id.clone(),
        round: mask.round,
        payload,
        n_samples: update.n_samples,
        declaration,
        freshness,
        payload_hash: Digest::ZERO,
    };
    out.payload_hash = out.compute_hash();
    Ok(out)
}
