//! In-process hash-chained ledger.
//!
//! `block_hash = H(index ‖ prev_hash ‖ payload_hash ‖ meta ‖ attestations)`
//! with the canonical encoding from [`crate::codec`]. Blocks are appended only
//! after the admission contract accepts the submission and a stake-weighted
//! committee reaches quorum.

mod committee;
mod contract;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::FreshnessTag;
use crate::codec::{canonical_hash, DecodeError, Decoder, Digest, Encoder};
use crate::seed;

pub use committee::{Attestation, Behavior, Validator, ValidatorSet};
pub use contract::{contract_validate, ContractRules, LedgerState, Submission, Verdict, Violation};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("rejected by contract: {0:?}")]
    Rejected(Vec<Violation>),
    #[error("quorum not reached: {attesting} of required {required} stake attested")]
    Quorum { attesting: f64, required: f64 },
    #[error("validator set is empty")]
    EmptyValidatorSet,
    #[error("stakes must be non-negative with a positive total")]
    BadStake,
    #[error("quorum fraction {0} must be in (1/2, 1]")]
    BadQuorum(f64),
    #[error("committee size {size} invalid for {available} validators")]
    CommitteeSize { size: usize, available: usize },
    #[error("chain fails verification at block {0}")]
    Invalid(usize),
    #[error("model version {0} not found in ledger")]
    UnknownVersion(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    LocalUpdate,
    GlobalModel,
    Feedback,
}

impl BlockKind {
    fn tag(self) -> u8 {
        match self {
            BlockKind::LocalUpdate => 0,
            BlockKind::GlobalModel => 1,
            BlockKind::Feedback => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMeta {
    pub kind: BlockKind,
    /// Node id for local updates and node-side feedback, `cloud` otherwise.
    pub party: String,
    pub round: u64,
    /// Global model version this block belongs to (the base version for
    /// local updates).
    pub version: u64,
    pub freshness: FreshnessTag,
    pub epsilon_charged: f64,
    pub update_norm: f64,
    pub n_samples: u64,
}

impl BlockMeta {
    pub fn encode_into(&self, e: &mut Encoder) {
        e.u8(self.kind.tag()).str(&self.party).u64(self.round).u64(self.version);
        self.freshness.encode_into(e);
        e.f64(self.epsilon_charged).f64(self.update_norm).u64(self.n_samples);
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let kind = match d.u8()? {
            0 => BlockKind::LocalUpdate,
            1 => BlockKind::GlobalModel,
            2 => BlockKind::Feedback,
            t => return Err(DecodeError::Tag(t)),
        };
        Ok(Self {
            kind,
            party: d.str()?,
            round: d.u64()?,
            version: d.u64()?,
            freshness: FreshnessTag::decode_from(d)?,
            epsilon_charged: d.f64()?,
            update_norm: d.f64()?,
            n_samples: d.u64()?,
        })
    }
}

/// Owned form of a [`Submission`], as carried over the wire to the ledger.
#[derive(Clone, Debug, PartialEq)]
pub struct SubmissionRecord {
    pub meta: BlockMeta,
    pub payload: Vec<u8>,
    pub claimed_hash: Digest,
}

impl SubmissionRecord {
    pub fn as_submission(&self) -> Submission<'_> {
        Submission {
            meta: self.meta.clone(),
            payload: &self.payload,
            claimed_hash: self.claimed_hash,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.meta.encode_into(&mut e);
        e.bytes(&self.payload).fixed(&self.claimed_hash.0);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let meta = BlockMeta::decode_from(&mut d)?;
        let payload = d.bytes()?.to_vec();
        let claimed_hash = Digest(d.fixed::<32>()?);
        d.finish()?;
        Ok(Self {
            meta,
            payload,
            claimed_hash,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_hash: Digest,
    pub payload_hash: Digest,
    pub meta: BlockMeta,
    pub attestations: Vec<Attestation>,
    pub block_hash: Digest,
}

fn preimage(index: u64, prev: &Digest, payload: &Digest, meta: &BlockMeta) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(index).fixed(&prev.0).fixed(&payload.0);
    meta.encode_into(&mut e);
    e.finish()
}

fn attestation_bytes(atts: &[Attestation]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(atts.len() as u64);
    for a in atts {
        e.str(&a.validator).fixed(&a.digest.0);
    }
    e.finish()
}

impl LedgerBlock {
    pub fn preimage(&self) -> Vec<u8> {
        preimage(self.index, &self.prev_hash, &self.payload_hash, &self.meta)
    }

    pub fn compute_hash(&self) -> Digest {
        let mut bytes = self.preimage();
        bytes.extend_from_slice(&attestation_bytes(&self.attestations));
        canonical_hash(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainStatus {
    Valid,
    FirstBadIndex(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chain {
    pub blocks: Vec<LedgerBlock>,
}

impl Chain {
    /// Chain holding only the genesis block, which logs the initial model.
    pub fn genesis(initial_model_hash: Digest) -> Self {
        let meta = BlockMeta {
            kind: BlockKind::GlobalModel,
            party: crate::channel::CLOUD.to_string(),
            round: 0,
            version: 0,
            freshness: FreshnessTag {
                nonce: 0,
                timestamp: 0,
                round: 0,
            },
            epsilon_charged: 0.0,
            update_norm: 0.0,
            n_samples: 0,
        };
        let mut block = LedgerBlock {
            index: 0,
            prev_hash: Digest::ZERO,
            payload_hash: initial_model_hash,
            meta,
            attestations: Vec::new(),
            block_hash: Digest::ZERO,
        };
        block.block_hash = block.compute_hash();
        Self { blocks: vec![block] }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head(&self) -> Option<&LedgerBlock> {
        self.blocks.last()
    }

    pub fn head_hash(&self) -> Digest {
        self.head().map(|b| b.block_hash).unwrap_or(Digest::ZERO)
    }

    pub fn to_json(&self) -> Result<String, LedgerError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, LedgerError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn export(&self, path: &Path) -> Result<(), LedgerError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self, LedgerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Recomputes every link and hash; reports the earliest inconsistent block.
pub fn verify_chain(chain: &Chain) -> ChainStatus {
    for (k, b) in chain.blocks.iter().enumerate() {
        let expected_prev = if k == 0 {
            Digest::ZERO
        } else {
            chain.blocks[k - 1].block_hash
        };
        if b.index != k as u64 || b.prev_hash != expected_prev || b.compute_hash() != b.block_hash {
            return ChainStatus::FirstBadIndex(k);
        }
    }
    ChainStatus::Valid
}

#[derive(Clone, Copy, Debug)]
pub struct AppendConfig {
    pub committee_size: usize,
}

/// Validates, gathers committee attestations, and appends on quorum.
///
/// On success the submission's nonce is recorded and its epsilon charged.
/// The chain and state are untouched on any error.
pub fn append_block<'c>(
    chain: &'c mut Chain,
    sub: &Submission<'_>,
    vset: &ValidatorSet,
    rules: &ContractRules,
    state: &mut LedgerState,
    cfg: AppendConfig,
) -> Result<&'c LedgerBlock, LedgerError> {
    if let Verdict::Reject(reasons) = contract_validate(sub, rules, state) {
        return Err(LedgerError::Rejected(reasons));
    }
    let index = chain.len() as u64;
    let prev_hash = chain.head_hash();
    let pre = preimage(index, &prev_hash, &sub.claimed_hash, &sub.meta);

    let size = cfg.committee_size.min(vset.validators.len());
    let committee = vset.select_committee(seed::derive_seed(vset.seed, "block-committee", &[index]), size)?;
    let committee_stake: f64 = committee.iter().map(|id| vset.stake_of(id)).sum();
    let attestations: Vec<Attestation> = committee
        .iter()
        .filter_map(|id| vset.attest(id, &pre))
        .filter(|a| vset.verify_attestation(a, &pre))
        .collect();
    let attesting: f64 = attestations.iter().map(|a| vset.stake_of(&a.validator)).sum();
    let required = vset.quorum_fraction * committee_stake;
    if attesting < required {
        return Err(LedgerError::Quorum { attesting, required });
    }

    if sub.meta.epsilon_charged > 0.0 {
        state
            .budget
            .charge(&sub.meta.party, sub.meta.epsilon_charged)
            .map_err(|_| LedgerError::Rejected(vec![Violation::OverBudget]))?;
    }
    state.seen_nonces.insert(sub.meta.freshness.nonce);

    let mut block = LedgerBlock {
        index,
        prev_hash,
        payload_hash: sub.claimed_hash,
        meta: sub.meta.clone(),
        attestations,
        block_hash: Digest::ZERO,
    };
    block.block_hash = block.compute_hash();
    chain.blocks.push(block);
    Ok(chain.blocks.last().unwrap())
}

/// Blocks that produced a model version: the local updates aggregated into
/// it, its global-model block, and feedback blocks logged in the same round.
pub fn provenance_query(chain: &Chain, version: u64) -> Result<Vec<LedgerBlock>, LedgerError> {
    if let ChainStatus::FirstBadIndex(k) = verify_chain(chain) {
        return Err(LedgerError::Invalid(k));
    }
    let (gidx, global) = chain
        .blocks
        .iter()
        .enumerate()
        .find(|(_, b)| b.meta.kind == BlockKind::GlobalModel && b.meta.version == version)
        .ok_or(LedgerError::UnknownVersion(version))?;
    if version == 0 {
        return Ok(vec![global.clone()]);
    }
    let round = global.meta.round;
    let mut lineage: Vec<LedgerBlock> = chain.blocks[..gidx]
        .iter()
        .filter(|b| b.meta.kind == BlockKind::LocalUpdate && b.meta.round == round)
        .cloned()
        .collect();
    lineage.push(global.clone());
    lineage.extend(
        chain.blocks[gidx + 1..]
            .iter()
            .filter(|b| b.meta.kind == BlockKind::Feedback && b.meta.round == round)
            .cloned(),
    );
    Ok(lineage)
}

/// Re-checks contract predicates that are recoverable from the chain alone:
/// unique nonces, cumulative epsilon under the cap, norm and sample bounds.
pub fn audit_admission(chain: &Chain, rules: &ContractRules) -> Vec<(usize, Violation)> {
    let mut out = Vec::new();
    let mut nonces = std::collections::BTreeSet::new();
    let mut spent = std::collections::BTreeMap::<&str, f64>::new();
    for (k, b) in chain.blocks.iter().enumerate().skip(1) {
        let m = &b.meta;
        if !nonces.insert(m.freshness.nonce) {
            out.push((k, Violation::Replay));
        }
        let s = spent.entry(m.party.as_str()).or_default();
        *s += m.epsilon_charged;
        if *s > rules.epsilon_cap {
            out.push((k, Violation::OverBudget));
        }
        if m.kind == BlockKind::LocalUpdate {
            if m.update_norm > rules.max_update_norm {
                out.push((k, Violation::NormBound));
            }
            if m.n_samples == 0 || m.n_samples > rules.max_declared_samples {
                out.push((k, Violation::DeclaredSamples));
            }
        }
    }
    out
}

/// Addressable fields of a block, for bit-level tamper experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockField {
    Index,
    PrevHash,
    PayloadHash,
    Kind,
    Party,
    Round,
    Version,
    Nonce,
    Timestamp,
    FreshRound,
    Epsilon,
    UpdateNorm,
    NSamples,
    AttestationValidator,
    AttestationDigest,
    BlockHash,
}

impl BlockField {
    pub const ALL: [BlockField; 16] = [
        BlockField::Index,
        BlockField::PrevHash,
        BlockField::PayloadHash,
        BlockField::Kind,
        BlockField::Party,
        BlockField::Round,
        BlockField::Version,
        BlockField::Nonce,
        BlockField::Timestamp,
        BlockField::FreshRound,
        BlockField::Epsilon,
        BlockField::UpdateNorm,
        BlockField::NSamples,
        BlockField::AttestationValidator,
        BlockField::AttestationDigest,
        BlockField::BlockHash,
    ];

    /// Number of flippable bits in this field of `b` (0 if absent).
    pub fn bit_len(self, b: &LedgerBlock) -> usize {
        match self {
            BlockField::Index
            | BlockField::Round
            | BlockField::Version
            | BlockField::Timestamp
            | BlockField::FreshRound
            | BlockField::Epsilon
            | BlockField::UpdateNorm
            | BlockField::NSamples => 64,
            BlockField::Nonce => 128,
            BlockField::PrevHash | BlockField::PayloadHash | BlockField::BlockHash => 256,
            BlockField::Kind => 1,
            // low seven bits of each byte keep the string ASCII
            BlockField::Party => b.meta.party.len() * 7,
            BlockField::AttestationValidator => b.attestations.first().map_or(0, |a| a.validator.len() * 7),
            BlockField::AttestationDigest => b.attestations.first().map_or(0, |_| 256),
        }
    }
}

fn flip_digest(d: &mut Digest, bit: usize) {
    d.0[bit / 8] ^= 1 << (bit % 8);
}

fn flip_ascii(s: &mut String, bit: usize) {
    let mut bytes = std::mem::take(s).into_bytes();
    bytes[bit / 7] ^= 1 << (bit % 7);
    *s = String::from_utf8(bytes).expect("ascii stays ascii");
}

/// Flips one bit of `field`. `bit` is taken modulo the field's bit length.
/// Returns false when the field is absent on this block.
pub fn flip_bit(b: &mut LedgerBlock, field: BlockField, bit: usize) -> bool {
    let len = field.bit_len(b);
    if len == 0 {
        return false;
    }
    let bit = bit % len;
    let flip64 = |v: &mut u64| *v ^= 1u64 << bit;
    match field {
        BlockField::Index => flip64(&mut b.index),
        BlockField::PrevHash => flip_digest(&mut b.prev_hash, bit),
        BlockField::PayloadHash => flip_digest(&mut b.payload_hash, bit),
        BlockField::Kind => {
            b.meta.kind = match b.meta.kind {
                BlockKind::LocalUpdate => BlockKind::GlobalModel,
                BlockKind::GlobalModel => BlockKind::Feedback,
                BlockKind::Feedback => BlockKind::LocalUpdate,
            }
        }
        BlockField::Party => flip_ascii(&mut b.meta.party, bit),
        BlockField::Round => flip64(&mut b.meta.round),
        BlockField::Version => flip64(&mut b.meta.version),
        BlockField::Nonce => b.meta.freshness.nonce ^= 1u128 << bit,
        BlockField::Timestamp => flip64(&mut b.meta.freshness.timestamp),
        BlockField::FreshRound => flip64(&mut b.meta.freshness.round),
        BlockField::Epsilon => {
            b.meta.epsilon_charged = f64::from_bits(b.meta.epsilon_charged.to_bits() ^ (1u64 << bit))
        }
        BlockField::UpdateNorm => b.meta.update_norm = f64::from_bits(b.meta.update_norm.to_bits() ^ (1u64 << bit)),
        BlockField::NSamples => flip64(&mut b.meta.n_samples),
        BlockField::AttestationValidator => flip_ascii(&mut b.attestations[0].validator, bit),
        BlockField::AttestationDigest => flip_digest(&mut b.attestations[0].digest, bit),
        BlockField::BlockHash => flip_digest(&mut b.block_hash, bit),
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn vset(n: usize) -> ValidatorSet {
        let stakes: BTreeMap<String, f64> = (0..n).map(|i| (format!("v{i}"), 1.0)).collect();
        ValidatorSet::new(&stakes, 2.0 / 3.0, 7).unwrap()
    }

    fn local_meta(party: &str, round: u64, nonce: u128, ts: u64) -> BlockMeta {
        BlockMeta {
            kind: BlockKind::LocalUpdate,
            party: party.into(),
            round,
            version: round - 1,
            freshness: FreshnessTag {
                nonce,
                timestamp: ts,
                round,
            },
            epsilon_charged: 1.0,
            update_norm: 0.5,
            n_samples: 10,
        }
    }

    fn global_meta(round: u64, version: u64, nonce: u128, ts: u64) -> BlockMeta {
        BlockMeta {
            kind: BlockKind::GlobalModel,
            party: "cloud".into(),
            round,
            version,
            freshness: FreshnessTag {
                nonce,
                timestamp: ts,
                round,
            },
            epsilon_charged: 0.0,
            update_norm: 0.0,
            n_samples: 20,
        }
    }

    fn append(
        chain: &mut Chain,
        meta: BlockMeta,
        payload: &[u8],
        vs: &ValidatorSet,
        st: &mut LedgerState,
    ) -> Result<(), LedgerError> {
        let sub = Submission {
            meta,
            payload,
            claimed_hash: canonical_hash(payload),
        };
        let rules = ContractRules {
            epsilon_cap: st.budget.cap,
            ..ContractRules::default()
        };
        append_block(chain, &sub, vs, &rules, st, AppendConfig { committee_size: 3 }).map(|_| ())
    }

    fn state_at(now: u64) -> LedgerState {
        let mut s = LedgerState::new(1e9);
        s.now = now;
        s
    }

    pub(crate) fn build_chain(blocks: usize) -> Chain {
        let vs = vset(3);
        let mut st = state_at(0);
        let mut chain = Chain::genesis(canonical_hash(b"model-0"));
        let mut i = 0u128;
        while chain.len() < blocks {
            i += 1;
            let payload = format!("payload-{i}");
            append(
                &mut chain,
                local_meta(&format!("node-{}", i % 4), 1 + i as u64 / 4, i, 0),
                payload.as_bytes(),
                &vs,
                &mut st,
            )
            .unwrap();
        }
        chain
    }

    #[test]
    fn submission_wire_round_trip() {
        let rec = SubmissionRecord {
            meta: local_meta("node-001", 3, 99, 30),
            payload: b"payload".to_vec(),
            claimed_hash: canonical_hash(b"payload"),
        };
        assert_eq!(SubmissionRecord::decode(&rec.encode()).unwrap(), rec);
        let mut bad = rec.encode();
        bad[0] = 7;
        assert_eq!(SubmissionRecord::decode(&bad), Err(DecodeError::Tag(7)));
    }

    #[test]
    fn genesis_only_is_valid() {
        let c = Chain::genesis(canonical_hash(b"m"));
        assert_eq!(verify_chain(&c), ChainStatus::Valid);
        assert_eq!(c.blocks[0].prev_hash, Digest::ZERO);
    }

    #[test]
    fn append_links_and_grows() {
        let vs = vset(3);
        let mut st = state_at(5);
        let mut c = Chain::genesis(canonical_hash(b"m"));
        let head = c.head_hash();
        append(&mut c, local_meta("a", 1, 1, 5), b"u", &vs, &mut st).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.blocks[1].prev_hash, head);
        assert_eq!(c.blocks[1].attestations.len(), 3);
        assert_eq!(st.budget.spent("a"), 1.0);
        assert!(st.seen_nonces.contains(&1));
        assert_eq!(verify_chain(&c), ChainStatus::Valid);
    }

    #[test]
    fn one_of_three_attestations_misses_quorum() {
        let vs = vset(3)
            .with_behavior("v1", Behavior::Refuse)
            .with_behavior("v2", Behavior::FalseAttest);
        let mut st = state_at(0);
        let mut c = Chain::genesis(canonical_hash(b"m"));
        let err = append(&mut c, local_meta("a", 1, 1, 0), b"u", &vs, &mut st).unwrap_err();
        assert!(matches!(err, LedgerError::Quorum { .. }));
        assert_eq!(c.len(), 1);
        assert!(st.seen_nonces.is_empty());
        assert_eq!(st.budget.spent("a"), 0.0);
    }

    #[test]
    fn two_of_three_reaches_quorum() {
        let vs = vset(3).with_behavior("v1", Behavior::Refuse);
        let mut st = state_at(0);
        let mut c = Chain::genesis(canonical_hash(b"m"));
        append(&mut c, local_meta("a", 1, 1, 0), b"u", &vs, &mut st).unwrap();
        assert_eq!(c.blocks[1].attestations.len(), 2);
    }

    #[test]
    fn contract_rejection_is_distinct_from_quorum() {
        let vs = vset(3);
        let mut st = state_at(0);
        let mut c = Chain::genesis(canonical_hash(b"m"));
        append(&mut c, local_meta("a", 1, 1, 0), b"u", &vs, &mut st).unwrap();
        let err = append(&mut c, local_meta("a", 1, 1, 0), b"u2", &vs, &mut st).unwrap_err();
        assert!(matches!(err, LedgerError::Rejected(ref v) if v == &vec![Violation::Replay]));
    }

    #[test]
    fn untampered_hundred_blocks_valid() {
        assert_eq!(verify_chain(&build_chain(100)), ChainStatus::Valid);
    }

    #[test]
    fn meta_bit_flip_found_at_its_block() {
        let mut c = build_chain(30);
        flip_bit(&mut c.blocks[17], BlockField::Round, 3);
        assert_eq!(verify_chain(&c), ChainStatus::FirstBadIndex(17));
    }

    #[test]
    fn every_field_flip_detected_exhaustively() {
        let chain = build_chain(12);
        for k in 0..chain.len() {
            for field in BlockField::ALL {
                let len = field.bit_len(&chain.blocks[k]);
                for bit in 0..len {
                    let mut c = chain.clone();
                    assert!(flip_bit(&mut c.blocks[k], field, bit));
                    assert_eq!(
                        verify_chain(&c),
                        ChainStatus::FirstBadIndex(k),
                        "block {k} field {field:?} bit {bit}"
                    );
                }
            }
        }
    }

    #[test]
    fn provenance_for_two_node_round() {
        let vs = vset(3);
        let mut st = state_at(0);
        let mut c = Chain::genesis(canonical_hash(b"m"));
        append(&mut c, local_meta("a", 1, 1, 0), b"ua", &vs, &mut st).unwrap();
        append(&mut c, local_meta("b", 1, 2, 0), b"ub", &vs, &mut st).unwrap();
        append(&mut c, global_meta(1, 1, 3, 0), b"g1", &vs, &mut st).unwrap();
        let lineage = provenance_query(&c, 1).unwrap();
        assert_eq!(lineage.len(), 3);
        assert_eq!(
            lineage.iter().filter(|b| b.meta.kind == BlockKind::LocalUpdate).count(),
            2
        );
        assert_eq!(lineage[2].meta.kind, BlockKind::GlobalModel);
        assert_eq!(provenance_query(&c, 1).unwrap(), lineage);

        let g = provenance_query(&c, 0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].index, 0);

        assert!(matches!(provenance_query(&c, 9), Err(LedgerError::UnknownVersion(9))));

        flip_bit(&mut c.blocks[1], BlockField::Epsilon, 2);
        assert!(matches!(provenance_query(&c, 1), Err(LedgerError::Invalid(1))));
    }

    #[test]
    fn audit_finds_nothing_on_admitted_chain() {
        let c = build_chain(40);
        assert!(audit_admission(&c, &ContractRules::default()).is_empty());
    }

    #[test]
    fn json_export_round_trip_preserves_hashes() {
        let c = build_chain(12);
        let back = Chain::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(verify_chain(&back), ChainStatus::Valid);
    }
}
