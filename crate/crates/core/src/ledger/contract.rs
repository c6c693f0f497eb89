//! Admission rules run before any block is attested.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{canonical_hash, Digest};
use crate::privacy::BudgetLedger;

use super::{BlockKind, BlockMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractRules {
    /// Maximum age of a submission, in simulated ticks.
    pub freshness_window: u64,
    pub epsilon_cap: f64,
    /// Bound on the declared pre-noise update norm of a local update.
    pub max_update_norm: f64,
    /// Bound on the sample count a node may declare for FedAvg weighting.
    pub max_declared_samples: u64,
}

impl Default for ContractRules {
    fn default() -> Self {
        Self {
            freshness_window: 20,
            epsilon_cap: 20.0,
            max_update_norm: 5.0,
            max_declared_samples: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    HashMismatch,
    Replay,
    Stale,
    OverBudget,
    NormBound,
    DeclaredSamples,
    NonFinite,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::HashMismatch => "hash_mismatch",
            Violation::Replay => "replay",
            Violation::Stale => "stale",
            Violation::OverBudget => "over_budget",
            Violation::NormBound => "norm_bound",
            Violation::DeclaredSamples => "declared_samples",
            Violation::NonFinite => "non_finite",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(Vec<Violation>),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Mutable state the contract reads: nonces already logged, the privacy
/// budget, and the current tick.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerState {
    pub seen_nonces: BTreeSet<u128>,
    pub budget: BudgetLedger,
    pub now: u64,
}

impl LedgerState {
    pub fn new(epsilon_cap: f64) -> Self {
        Self {
            seen_nonces: BTreeSet::new(),
            budget: BudgetLedger::new(epsilon_cap),
            now: 0,
        }
    }
}

/// Something offered to the ledger: metadata, the canonical bytes the hash
/// covers, and the hash the submitter claims.
#[derive(Clone, Debug)]
pub struct Submission<'a> {
    pub meta: BlockMeta,
    pub payload: &'a [u8],
    pub claimed_hash: Digest,
}

/// Every violated rule is reported, not just the first.
pub fn contract_validate(sub: &Submission<'_>, rules: &ContractRules, state: &LedgerState) -> Verdict {
    let m = &sub.meta;
    let mut v = Vec::new();
    if canonical_hash(sub.payload) != sub.claimed_hash {
        v.push(Violation::HashMismatch);
    }
    if state.seen_nonces.contains(&m.freshness.nonce) {
        v.push(Violation::Replay);
    }
    let ts = m.freshness.timestamp;
    if ts > state.now || state.now - ts > rules.freshness_window {
        v.push(Violation::Stale);
    }
    if !(m.epsilon_charged.is_finite() && m.update_norm.is_finite()) || m.epsilon_charged < 0.0 {
        v.push(Violation::NonFinite);
    } else if m.epsilon_charged > 0.0 && state.budget.spent(&m.party) + m.epsilon_charged > rules.epsilon_cap {
        v.push(Violation::OverBudget);
    }
    if m.kind == BlockKind::LocalUpdate {
        if m.update_norm > rules.max_update_norm {
            v.push(Violation::NormBound);
        }
        if m.n_samples == 0 || m.n_samples > rules.max_declared_samples {
            v.push(Violation::DeclaredSamples);
        }
    }
    if v.is_empty() {
        Verdict::Accept
    } else {
        Verdict::Reject(v)
    }
}
