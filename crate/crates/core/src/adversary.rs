//! Attack injection against recorded honest traffic.
//!
//! Each attack perturbs a trace from a completed honest round and replays it
//! against fresh receiver state, the ledger contract, or the exported chain.
//! An attack is detected when it ends in a typed rejection. Side-channel and
//! front-running attacks have no mechanism in the protocol to test and are
//! not modelled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{open, seal_raw, Envelope, FreshnessTag, Inbox, KeyRegistry, CLOUD, LEDGER};
use crate::ledger::{
    contract_validate, flip_bit, verify_chain, BlockField, BlockKind, BlockMeta, Chain, ChainStatus, ContractRules,
    LedgerState, SubmissionRecord, Verdict, Violation,
};
use crate::masking::{apply_mask, Declaration};
use crate::model::GradientUpdate;
use crate::orchestrator::{run_traced, PreMask, RoundTrace, RunConfig, RunError};
use crate::privacy::add_noise_vec;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Replay,
    TamperMessage,
    TamperBlock,
    SpoofNode,
    PoisonUpdate,
    Eavesdrop,
    Impersonate,
    MitmSwap,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Replay,
        AttackKind::TamperMessage,
        AttackKind::TamperBlock,
        AttackKind::SpoofNode,
        AttackKind::PoisonUpdate,
        AttackKind::Eavesdrop,
        AttackKind::Impersonate,
        AttackKind::MitmSwap,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::Replay => "replay",
            AttackKind::TamperMessage => "tamper_message",
            AttackKind::TamperBlock => "tamper_block",
            AttackKind::SpoofNode => "spoof_node",
            AttackKind::PoisonUpdate => "poison_update",
            AttackKind::Eavesdrop => "eavesdrop",
            AttackKind::Impersonate => "impersonate",
            AttackKind::MitmSwap => "mitm_swap",
        }
    }

    /// True for attacks that forge or alter a sealed envelope.
    pub fn is_wire(self) -> bool {
        matches!(
            self,
            AttackKind::Replay
                | AttackKind::TamperMessage
                | AttackKind::SpoofNode
                | AttackKind::Impersonate
                | AttackKind::MitmSwap
        )
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| AttackError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("unknown attack kind {0:?}")]
    UnknownKind(String),
    #[error("trace has no {0} to attack")]
    EmptyTrace(&'static str),
    #[error("baseline run for seed {0} completed no rounds")]
    NoBaseline(u64),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Everything an adversary can observe or touch after an honest round.
#[derive(Clone, Copy)]
pub struct Traffic<'a> {
    pub trace: &'a RoundTrace,
    pub chain: &'a Chain,
    pub keys: &'a KeyRegistry,
    pub poison_factor: f64,
}

#[derive(Clone, Debug)]
pub enum Injection {
    /// The wire trace with one adversarial envelope at `at`.
    Wire { envelopes: Vec<Envelope>, at: usize },
    Block {
        chain: Chain,
        index: usize,
        field: BlockField,
    },
    Poison {
        submission: SubmissionRecord,
        original_norm: f64,
        injected_norm: f64,
    },
    /// Every byte the adversary saw on the wire.
    Recording(Vec<u8>),
}

/// A node's clipped update scaled by `factor`, as a compromised trainer
/// would hand it to the masking step.
pub fn poison_update(pre: &PreMask, factor: f64) -> GradientUpdate {
    pre.clipped.scaled(factor)
}

/// Flips one bit of the ciphertext or, rarely, of the tag.
pub fn flip_envelope_bit<R: Rng>(env: &mut Envelope, rng: &mut R) {
    let bits = (env.ciphertext.len() + env.auth_tag.len()) * 8;
    let bit = rng.random_range(0..bits);
    let (byte, mask) = (bit / 8, 1u8 << (bit % 8));
    if byte < env.ciphertext.len() {
        env.ciphertext[byte] ^= mask;
    } else {
        env.auth_tag[byte - env.ciphertext.len()] ^= mask;
    }
}

fn fresh_tag<R: Rng>(trace: &RoundTrace, rng: &mut R) -> FreshnessTag {
    FreshnessTag {
        nonce: rng.random(),
        timestamp: trace.now,
        round: trace.round,
    }
}

/// A plausible ledger submission claiming to come from `party`.
fn forged_payload<R: Rng>(trace: &RoundTrace, party: &str, rng: &mut R) -> Vec<u8> {
    match trace.submissions.choose(rng) {
        Some(s) => {
            let mut s = s.clone();
            s.meta.party = party.to_string();
            s.meta.freshness = fresh_tag(trace, rng);
            s.encode()
        }
        None => (0..64).map(|_| rng.random()).collect(),
    }
}

/// Parties other than `a` and `b` that share a key with `a`.
fn reroute_targets(keys: &KeyRegistry, a: &str, b: &str) -> Vec<String> {
    let mut all: Vec<String> = keys.k_pc.keys().cloned().collect();
    all.push(CLOUD.to_string());
    all.push(LEDGER.to_string());
    all.into_iter()
        .filter(|p| p != a && p != b && keys.key_between(a, p).is_some())
        .collect()
}

pub fn inject<R: Rng>(kind: AttackKind, traffic: &Traffic<'_>, rng: &mut R) -> Result<Injection, AttackError> {
    let trace = traffic.trace;
    let mut envelopes = trace.envelopes.clone();
    let pick = |rng: &mut R| -> Result<usize, AttackError> {
        if trace.envelopes.is_empty() {
            return Err(AttackError::EmptyTrace("envelope"));
        }
        Ok(rng.random_range(0..trace.envelopes.len()))
    };
    match kind {
        AttackKind::Replay => {
            let i = pick(rng)?;
            let dup = envelopes[i].clone();
            envelopes.push(dup);
            let at = envelopes.len() - 1;
            Ok(Injection::Wire { envelopes, at })
        }
        AttackKind::TamperMessage => {
            let i = pick(rng)?;
            flip_envelope_bit(&mut envelopes[i], rng);
            Ok(Injection::Wire { envelopes, at: i })
        }
        AttackKind::SpoofNode | AttackKind::Impersonate => {
            let sender = if kind == AttackKind::SpoofNode {
                format!("intruder-{:04}", rng.random_range(0..10_000u32))
            } else {
                traffic
                    .keys
                    .k_pb
                    .keys()
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .map(|s| s.to_string())
                    .ok_or(AttackError::EmptyTrace("node"))?
            };
            let key: [u8; 32] = rng.random();
            let payload = forged_payload(trace, &sender, rng);
            let env = seal_raw(&key, &sender, LEDGER, fresh_tag(trace, rng), &payload);
            envelopes.push(env);
            let at = envelopes.len() - 1;
            Ok(Injection::Wire { envelopes, at })
        }
        AttackKind::MitmSwap => {
            let i = pick(rng)?;
            let env = &mut envelopes[i];
            let targets = reroute_targets(traffic.keys, &env.sender, &env.receiver);
            env.receiver = targets
                .choose(rng)
                .ok_or(AttackError::EmptyTrace("reroute target"))?
                .clone();
            // the diverted copy is delivered first, ahead of the honest traffic
            let diverted = envelopes.remove(i);
            envelopes.insert(0, diverted);
            Ok(Injection::Wire { envelopes, at: 0 })
        }
        AttackKind::TamperBlock => {
            let mut chain = traffic.chain.clone();
            if chain.is_empty() {
                return Err(AttackError::EmptyTrace("block"));
            }
            let index = rng.random_range(0..chain.len());
            let b = &mut chain.blocks[index];
            let fields: Vec<BlockField> = BlockField::ALL.into_iter().filter(|f| f.bit_len(b) > 0).collect();
            let field = *fields.choose(rng).expect("every block has an index field");
            let bit = rng.random_range(0..field.bit_len(b));
            flip_bit(b, field, bit);
            Ok(Injection::Block { chain, index, field })
        }
        AttackKind::PoisonUpdate => {
            let (k, pre) = trace
                .premask
                .iter()
                .collect::<Vec<_>>()
                .choose(rng)
                .map(|(k, p)| ((*k).clone(), (*p).clone()))
                .ok_or(AttackError::EmptyTrace("local update"))?;
            let submission = poisoned_submission(trace, &k, &pre, traffic.poison_factor, rng);
            Ok(Injection::Poison {
                original_norm: pre.clipped.norm(),
                injected_norm: submission.meta.update_norm,
                submission,
            })
        }
        AttackKind::Eavesdrop => Ok(Injection::Recording(
            trace.envelopes.iter().flat_map(|e| e.to_bytes()).collect(),
        )),
    }
}

/// Rebuilds node `k`'s local-update submission from a poisoned update, going
/// through the same noise, weighting and mask as the honest one.
fn poisoned_submission<R: Rng>(
    trace: &RoundTrace,
    k: &str,
    pre: &PreMask,
    factor: f64,
    rng: &mut R,
) -> SubmissionRecord {
    let poisoned = poison_update(pre, factor);
    let noised = GradientUpdate {
        grad: add_noise_vec(&poisoned.grad, pre.sigma, rng.random()),
        ..poisoned.clone()
    };
    let decl = Declaration {
        epsilon: pre.epsilon,
        update_norm: poisoned.norm(),
    };
    let masked = apply_mask(&noised.scaled(pre.weight), &pre.mask, fresh_tag(trace, rng), decl)
        .expect("trace mask matches the update dimension");
    SubmissionRecord {
        meta: BlockMeta {
            kind: BlockKind::LocalUpdate,
            party: k.to_string(),
            round: trace.round,
            version: trace.submissions.first().map_or(0, |s| s.meta.version),
            freshness: masked.freshness,
            epsilon_charged: if pre.epsilon.is_finite() { pre.epsilon } else { 0.0 },
            update_norm: decl.update_norm,
            n_samples: masked.n_samples,
        },
        payload: masked.body_bytes(),
        claimed_hash: masked.payload_hash,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub seed: u64,
    pub injected: usize,
    pub detected: usize,
    /// Injections the defense is designed to catch.
    pub expected: usize,
    /// Eavesdrop only: some raw coordinate appeared in the wire bytes.
    pub leaked: bool,
    /// Adversarial envelopes that authenticated and were accepted.
    pub successful_opens: usize,
    /// Adversarial submissions the ledger contract would admit.
    pub appended: usize,
    /// Count per typed outcome label.
    pub outcomes: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

impl AttackReport {
    fn new(kind: AttackKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            injected: 0,
            detected: 0,
            expected: 0,
            leaked: false,
            successful_opens: 0,
            appended: 0,
            outcomes: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn outcome(&mut self, label: impl Into<String>) {
        *self.outcomes.entry(label.into()).or_default() += 1;
    }

    /// Whether every injection the defense targets was caught and nothing
    /// adversarial got through.
    pub fn passed(&self) -> bool {
        match self.kind {
            AttackKind::Eavesdrop => !self.leaked,
            AttackKind::PoisonUpdate => {
                self.detected == self.expected && self.appended + self.detected == self.injected
            }
            _ => {
                self.detected == self.injected
                    && self.expected == self.injected
                    && self.successful_opens == 0
                    && self.appended == 0
            }
        }
    }
}

/// Ledger state after the round: every logged nonce is spent.
fn state_after(chain: &Chain, before: &LedgerState, now: u64) -> LedgerState {
    let mut st = before.clone();
    st.seen_nonces
        .extend(chain.blocks.iter().map(|b| b.meta.freshness.nonce));
    st.now = now;
    st
}

fn admits(rec: &SubmissionRecord, rules: &ContractRules, st: &LedgerState) -> Verdict {
    contract_validate(&rec.as_submission(), rules, st)
}

/// Delivers a perturbed wire trace to fresh inboxes in order and judges the
/// adversarial envelope at `at`.
fn judge_wire(
    report: &mut AttackReport,
    traffic: &Traffic<'_>,
    envelopes: &[Envelope],
    at: usize,
    window: u64,
    rules: &ContractRules,
    post: &LedgerState,
) {
    let mut inboxes: BTreeMap<String, Inbox> = BTreeMap::new();
    for (i, env) in envelopes.iter().enumerate() {
        let inbox = inboxes
            .entry(env.receiver.clone())
            .or_insert_with(|| Inbox::new(&env.receiver));
        let res = inbox.receive(traffic.keys, env, window, traffic.trace.now);
        if i != at {
            if res.is_err() {
                report.notes.push(format!("honest envelope {i} failed after injection"));
            }
            continue;
        }
        match res {
            Err(e) => {
                report.detected += 1;
                report.outcome(e.label());
            }
            Ok(plain) => {
                report.successful_opens += 1;
                report.outcome("opened");
                if env.receiver == LEDGER {
                    if let Ok(rec) = SubmissionRecord::decode(&plain) {
                        if admits(&rec, rules, post).is_accept() {
                            report.appended += 1;
                        }
                    }
                }
            }
        }
    }
}

/// A replayed ledger submission that somehow got past the channel must
/// still trip the contract's replay rule.
fn judge_ledger_replay(
    report: &mut AttackReport,
    env: &Envelope,
    traffic: &Traffic<'_>,
    window: u64,
    rules: &ContractRules,
    post: &LedgerState,
) {
    let Some(key) = traffic.keys.key_between(&env.sender, &env.receiver) else {
        return;
    };
    if env.receiver != LEDGER {
        return;
    }
    let Ok(plain) = open(key, env, window, &mut BTreeSet::new(), traffic.trace.now) else {
        return;
    };
    let Ok(rec) = SubmissionRecord::decode(&plain) else {
        return;
    };
    match admits(&rec, rules, post) {
        Verdict::Reject(v) if v.contains(&Violation::Replay) => report.outcome("ledger_replay"),
        Verdict::Reject(_) => report.outcome("ledger_other"),
        Verdict::Accept => {
            report.appended += 1;
            report.outcome("ledger_accepted");
        }
    }
}

/// Little- and big-endian byte patterns of `v`.
fn f64_patterns(v: f64) -> [[u8; 8]; 2] {
    [v.to_be_bytes(), v.to_le_bytes()]
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Runs `n` injections of `kind`, each against a randomly chosen traced
/// round of one honest baseline.
pub fn attack_baseline(
    kind: AttackKind,
    cfg: &RunConfig,
    traces: &[RoundTrace],
    chain: &Chain,
    keys: &KeyRegistry,
    factor: f64,
    n: usize,
) -> Result<AttackReport, AttackError> {
    if traces.is_empty() {
        return Err(AttackError::NoBaseline(cfg.seed));
    }
    let mut rng = seed::stream(cfg.seed, "attack", &[kind as u64, factor.to_bits()]);
    let mut report = AttackReport::new(kind, cfg.seed);
    let rules = &cfg.contract;
    let window = cfg.channel_window();

    if kind == AttackKind::Eavesdrop {
        let wire: Vec<u8> = traces
            .iter()
            .flat_map(|t| t.envelopes.iter().flat_map(|e| e.to_bytes()))
            .collect();
        for t in traces {
            for coords in t.raw_updates.values() {
                for &v in coords {
                    if v == 0.0 {
                        continue;
                    }
                    report.injected += 1;
                    report.expected += 1;
                    if f64_patterns(v).iter().any(|p| contains(&wire, p)) {
                        report.leaked = true;
                        report.outcome("found");
                    } else {
                        report.detected += 1;
                        report.outcome("absent");
                    }
                }
            }
        }
        report.notes.push(format!("{} wire bytes searched", wire.len()));
        return Ok(report);
    }

    for _ in 0..n {
        let trace = traces.choose(&mut rng).expect("non-empty");
        let traffic = Traffic {
            trace,
            chain,
            keys,
            poison_factor: factor,
        };
        let post = state_after(chain, &trace.ledger_before, trace.now);
        report.injected += 1;
        match inject(kind, &traffic, &mut rng)? {
            Injection::Wire { envelopes, at } => {
                report.expected += 1;
                judge_wire(&mut report, &traffic, &envelopes, at, window, rules, &post);
                if kind == AttackKind::Replay {
                    judge_ledger_replay(&mut report, &envelopes[at], &traffic, window, rules, &post);
                }
            }
            Injection::Block {
                chain: bad,
                index,
                field,
            } => {
                report.expected += 1;
                match verify_chain(&bad) {
                    ChainStatus::FirstBadIndex(k) if k == index => {
                        report.detected += 1;
                        report.outcome("first_bad_index");
                    }
                    ChainStatus::FirstBadIndex(k) => {
                        report.outcome("wrong_index");
                        report.notes.push(format!("block {index} {field:?} flagged at {k}"));
                    }
                    ChainStatus::Valid => {
                        report.appended += 1;
                        report.outcome("undetected");
                    }
                }
            }
            Injection::Poison {
                submission,
                injected_norm,
                ..
            } => {
                let over = injected_norm > rules.max_update_norm;
                report.expected += usize::from(over);
                match admits(&submission, rules, &trace.ledger_before) {
                    Verdict::Reject(v) => {
                        for x in &v {
                            report.outcome(x.to_string());
                        }
                        if v.contains(&Violation::NormBound) {
                            report.detected += 1;
                        }
                    }
                    Verdict::Accept => {
                        report.appended += 1;
                        report.outcome(if over {
                            "accepted_over_bound"
                        } else {
                            "accepted_within_bound"
                        });
                    }
                }
            }
            Injection::Recording(_) => unreachable!("eavesdrop handled above"),
        }
    }
    if kind == AttackKind::PoisonUpdate && report.expected < report.injected {
        report.notes.push(format!(
            "{} of {} scaled updates stayed within the norm bound {}; the bound is the only poisoning defense",
            report.injected - report.expected,
            report.injected,
            rules.max_update_norm
        ));
    }
    Ok(report)
}

/// Honest baseline per seed, then every attack kind against it. The poison
/// report is followed by a boundary probe at `attack.boundary_factor`.
pub fn run_attack_suite(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AttackReport>, AttackError> {
    let mut out = Vec::new();
    for &s in seeds {
        let mut base = cfg.clone();
        base.seed = s;
        base.poison_nodes.clear();
        let run = run_traced(&base)?;
        if run.traces.is_empty() {
            return Err(AttackError::NoBaseline(s));
        }
        let n = cfg.attack.injections_per_kind;
        for kind in AttackKind::ALL {
            let mut r = attack_baseline(
                kind,
                &base,
                &run.traces,
                &run.chain,
                &run.keys,
                cfg.attack.poison_factor,
                n,
            )?;
            if kind == AttackKind::PoisonUpdate {
                let probe = attack_baseline(
                    kind,
                    &base,
                    &run.traces,
                    &run.chain,
                    &run.keys,
                    cfg.attack.boundary_factor,
                    n,
                )?;
                r.notes.push(format!(
                    "boundary probe x{}: {} of {} accepted",
                    cfg.attack.boundary_factor, probe.appended, probe.injected
                ));
            }
            out.push(r);
        }
    }
    Ok(out)
}
