//! Stake-weighted validator committees and attestation stand-ins.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{hash_parts, Digest};
use crate::seed;

use super::LedgerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Never attests.
    Refuse,
    /// Attests over the wrong preimage.
    FalseAttest,
}

#[derive(Clone, Debug)]
pub struct Validator {
    pub stake: f64,
    pub behavior: Behavior,
    secret: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub validator: String,
    pub digest: Digest,
}

#[derive(Clone, Debug)]
pub struct ValidatorSet {
    pub validators: BTreeMap<String, Validator>,
    pub quorum_fraction: f64,
    pub seed: u64,
}

impl ValidatorSet {
    pub fn new(stakes: &BTreeMap<String, f64>, quorum_fraction: f64, seed: u64) -> Result<Self, LedgerError> {
        if stakes.is_empty() {
            return Err(LedgerError::EmptyValidatorSet);
        }
        if stakes.values().any(|s| !(s.is_finite() && *s >= 0.0)) || stakes.values().sum::<f64>() <= 0.0 {
            return Err(LedgerError::BadStake);
        }
        if !(quorum_fraction > 0.5 && quorum_fraction <= 1.0) {
            return Err(LedgerError::BadQuorum(quorum_fraction));
        }
        let validators = stakes
            .iter()
            .map(|(id, stake)| {
                let d = hash_parts(&[b"validator-secret", &seed.to_be_bytes(), id.as_bytes()]);
                (
                    id.clone(),
                    Validator {
                        stake: *stake,
                        behavior: Behavior::Honest,
                        secret: d.0,
                    },
                )
            })
            .collect();
        Ok(Self {
            validators,
            quorum_fraction,
            seed,
        })
    }

    pub fn with_behavior(mut self, id: &str, behavior: Behavior) -> Self {
        if let Some(v) = self.validators.get_mut(id) {
            v.behavior = behavior;
        }
        self
    }

    pub fn stake_of(&self, id: &str) -> f64 {
        self.validators.get(id).map(|v| v.stake).unwrap_or(0.0)
    }

    /// Stake-weighted sampling without replacement. Zero-stake validators are
    /// never drawn, so the committee may be smaller than `size` when fewer
    /// validators hold stake.
    pub fn select_committee(&self, round_seed: u64, size: usize) -> Result<Vec<String>, LedgerError> {
        if self.validators.is_empty() {
            return Err(LedgerError::EmptyValidatorSet);
        }
        if size == 0 || size > self.validators.len() {
            return Err(LedgerError::CommitteeSize {
                size,
                available: self.validators.len(),
            });
        }
        let mut rng = seed::stream(round_seed, "committee", &[]);
        let mut pool: Vec<(&String, f64)> = self
            .validators
            .iter()
            .filter(|(_, v)| v.stake > 0.0)
            .map(|(id, v)| (id, v.stake))
            .collect();
        let mut chosen = Vec::with_capacity(size);
        while chosen.len() < size && !pool.is_empty() {
            let total: f64 = pool.iter().map(|(_, s)| s).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, s)) in pool.iter().enumerate() {
                if u < *s {
                    pick = i;
                    break;
                }
                u -= s;
            }
            chosen.push(pool.remove(pick).0.clone());
        }
        Ok(chosen)
    }

    fn expected_digest(&self, id: &str, v: &Validator, preimage: &[u8]) -> Digest {
        hash_parts(&[id.as_bytes(), preimage, &v.secret])
    }

    pub fn attest(&self, id: &str, preimage: &[u8]) -> Option<Attestation> {
        let v = self.validators.get(id)?;
        let digest = match v.behavior {
            Behavior::Honest => self.expected_digest(id, v, preimage),
            Behavior::Refuse => return None,
            Behavior::FalseAttest => hash_parts(&[id.as_bytes(), b"forged", &v.secret]),
        };
        Some(Attestation {
            validator: id.to_string(),
            digest,
        })
    }

    pub fn verify_attestation(&self, att: &Attestation, preimage: &[u8]) -> bool {
        self.validators
            .get(&att.validator)
            .is_some_and(|v| self.expected_digest(&att.validator, v, preimage) == att.digest)
    }
}
