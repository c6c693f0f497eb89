//! Round loop tying the modules together.
//!
//! Per round: train locally, tune privacy, clip and noise, pre-weight by
//! sample share, mask, seal to the cloud, log each update through the ledger
//! contract, sum the masked payloads, optionally add global noise, log and
//! distribute the global model, run dual-model validation and correction on
//! every node, fuse local feedback with the global update, and log the
//! integrated model.
//!
//! A round aborts, keeping the previous global model, when any update is
//! rejected or the participant set would leave masks uncancelled.

mod artifacts;
pub mod config;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    global_from_delta, preprocess_updates, privacy_adjust_global, smpc_sum, AggregationError, DropRecord,
};
use crate::channel::{ChannelError, Endpoint, Envelope, FreshnessTag, Inbox, KeyRegistry, CLOUD, LEDGER};
use crate::codec::{canonical_hash, DecodeError, Decoder, Encoder};
use crate::ledger::{
    append_block, AppendConfig, BlockKind, BlockMeta, Chain, LedgerError, LedgerState, SubmissionRecord, ValidatorSet,
};
use crate::masking::{apply_mask, derive_masks, round_strength, Declaration, MaskError, MaskVector, MaskedUpdate};
use crate::model::{evaluate, l2_norm, train_local, GradientUpdate, ModelError, ModelParams};
use crate::privacy::{add_dp_noise, assess_context, clip_update, gaussian_sigma, BudgetLedger, PrivacyError};
use crate::seed::{derive_seed, id_part};
use crate::telemetry::{generate_fleet, DataError, FleetDataset, NodeId, Sample, SensitivityScorer};
use crate::xai::{
    compute_weights, integrate, local_correction, sample_diversity, validate_predictions, ExplainConfig,
    ExplanationRecord, FeedbackQuality, FeedbackUpdate, GlobalStats, IntegrationWeights, XaiError,
};

pub use artifacts::{read_explanations, write_artifacts, ArtifactPaths, SummaryRow};
pub use config::*;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Xai(#[from] XaiError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("channel failure on honest traffic ({context}): {source}")]
    Channel { context: String, source: ChannelError },
    #[error("undecodable message ({context}): {source}")]
    Decode { context: String, source: DecodeError },
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub party: String,
    pub kind: BlockKind,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub injected: usize,
    pub rejected: usize,
}

/// Per-round metrics. Integration metrics are absent for aborted rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub status: RoundStatus,
    pub abort_reason: Option<String>,
    pub participants: Vec<NodeId>,
    /// Version of the global model after this round.
    pub global_version: u64,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub global_fpr: f64,
    /// Means over participants, measured on each node's held-out split.
    pub integrated_accuracy: Option<f64>,
    pub integrated_fpr: Option<f64>,
    pub global_local_fpr: Option<f64>,
    /// Epsilon charged per party by blocks appended this round.
    pub epsilon_charged: BTreeMap<String, f64>,
    pub blocks_appended: usize,
    pub rejected: Vec<Rejection>,
    pub dropped: Vec<DropRecord>,
    pub agreement_rate: Option<f64>,
    pub explanation_consistency: Option<f64>,
    /// Keyed by node, or by `cloud` when the cloud integrates.
    pub weights: BTreeMap<String, IntegrationWeights>,
    pub attacks: Option<PoisonSummary>,
}

/// What a node hands to its masking step, kept for attack replay.
#[derive(Clone, Debug, PartialEq)]
pub struct PreMask {
    /// Clipped update before noise and weighting.
    pub clipped: GradientUpdate,
    pub sigma: f64,
    pub weight: f64,
    pub epsilon: f64,
    pub mask: MaskVector,
    pub freshness: FreshnessTag,
}

/// Everything observable about one completed round.
#[derive(Clone, Debug)]
pub struct RoundTrace {
    pub round: u64,
    pub now: u64,
    pub envelopes: Vec<Envelope>,
    /// Submissions the ledger accepted, in append order.
    pub submissions: Vec<SubmissionRecord>,
    pub premask: BTreeMap<NodeId, PreMask>,
    /// Unclipped training deltas, which must never appear on the wire.
    pub raw_updates: BTreeMap<NodeId, Vec<f64>>,
    /// Ledger state at the start of the round.
    pub ledger_before: LedgerState,
}

pub struct RunOutput {
    pub config: RunConfig,
    pub reports: Vec<RoundReport>,
    pub chain: Chain,
    pub budget: BudgetLedger,
    pub final_model: ModelParams,
    pub explanations: Vec<ExplanationRecord>,
    pub traces: Vec<RoundTrace>,
    pub keys: KeyRegistry,
}

pub fn build_validator_set(cfg: &RunConfig) -> Result<ValidatorSet, LedgerError> {
    ValidatorSet::new(
        &cfg.validators.stakes,
        cfg.validators.quorum_fraction,
        derive_seed(cfg.seed, "validators", &[]),
    )
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    Simulation::new(cfg, false)?.run()
}

/// Like [`run`], but keeps a full trace of every completed round.
pub fn run_traced(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    Simulation::new(cfg, true)?.run()
}

struct NodeRound {
    raw: GradientUpdate,
    premask: PreMask,
    weighted: GradientUpdate,
    declared_norm: f64,
}

struct Simulation {
    cfg: RunConfig,
    data: FleetDataset,
    eval: Vec<Sample>,
    nodes: Vec<NodeId>,
    sensitivity: BTreeMap<NodeId, f64>,
    keys: KeyRegistry,
    vset: ValidatorSet,
    chain: Chain,
    state: LedgerState,
    global: ModelParams,
    endpoints: BTreeMap<String, Endpoint>,
    inboxes: BTreeMap<String, Inbox>,
    loss_history: BTreeMap<NodeId, Vec<f64>>,
    reports: Vec<RoundReport>,
    explanations: Vec<ExplanationRecord>,
    record: bool,
    traces: Vec<RoundTrace>,
    trace: Option<RoundTrace>,
}

fn channel_err(context: impl Into<String>) -> impl FnOnce(ChannelError) -> RunError {
    let context = context.into();
    move |source| RunError::Channel { context, source }
}

fn decode_err(context: impl Into<String>) -> impl FnOnce(DecodeError) -> RunError {
    let context = context.into();
    move |source| RunError::Decode { context, source }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

enum Submitted {
    Appended,
    Rejected(Vec<String>),
}

impl Simulation {
    fn new(cfg: &RunConfig, record: bool) -> Result<Self, RunError> {
        cfg.validate()?;
        let data = generate_fleet(&cfg.fleet_params())?;
        let eval = data.holdout(derive_seed(cfg.seed, "eval", &[]), cfg.fleet.eval_samples);
        let nodes = data.node_ids();
        let scorer = SensitivityScorer::fit(&data.partitions, data.location_feature);
        let sensitivity = data
            .partitions
            .iter()
            .map(|p| (p.node_id.clone(), scorer.score(p)))
            .collect();
        let keys = KeyRegistry::generate(derive_seed(cfg.seed, "keys", &[]), &nodes);
        let vset = build_validator_set(cfg)?;
        let global = ModelParams::zeros(cfg.fleet.feature_dim);
        let chain = Chain::genesis(canonical_hash(&global.encode()));
        let ep_seed = derive_seed(cfg.seed, "endpoints", &[]);
        let parties: Vec<String> = nodes
            .iter()
            .cloned()
            .chain([CLOUD.to_string(), LEDGER.to_string()])
            .collect();
        Ok(Self {
            endpoints: parties.iter().map(|p| (p.clone(), Endpoint::new(p, ep_seed))).collect(),
            inboxes: parties.iter().map(|p| (p.clone(), Inbox::new(p))).collect(),
            loss_history: nodes.iter().map(|n| (n.clone(), Vec::new())).collect(),
            state: LedgerState::new(cfg.contract.epsilon_cap),
            cfg: cfg.clone(),
            data,
            eval,
            nodes,
            sensitivity,
            keys,
            vset,
            chain,
            global,
            reports: Vec::new(),
            explanations: Vec::new(),
            record,
            traces: Vec::new(),
            trace: None,
        })
    }

    fn run(mut self) -> Result<RunOutput, RunError> {
        for r in 1..=self.cfg.rounds {
            let report = self.round(r)?;
            if let Some(t) = self.trace.take() {
                if report.status == RoundStatus::Completed {
                    self.traces.push(t);
                }
            }
            self.reports.push(report);
        }
        Ok(RunOutput {
            config: self.cfg,
            reports: self.reports,
            chain: self.chain,
            budget: self.state.budget,
            final_model: self.global,
            explanations: self.explanations,
            traces: self.traces,
            keys: self.keys,
        })
    }

    fn seed(&self, domain: &str, round: u64, party: &str) -> u64 {
        derive_seed(self.cfg.seed, domain, &[round, id_part(party)])
    }

    fn now(&self, round: u64) -> u64 {
        round * self.cfg.ticks_per_round
    }

    fn split(&self, node: &str) -> (&[Sample], &[Sample]) {
        let p = self
            .data
            .partitions
            .iter()
            .find(|p| p.node_id == node)
            .expect("node ids come from the dataset");
        p.split(self.cfg.fleet.holdout_fraction)
    }

    /// Seals `payload` from `from` to `to` and has the receiver open it.
    fn send(&mut self, from: &str, to: &str, round: u64, payload: &[u8]) -> Result<Vec<u8>, RunError> {
        let now = self.now(round);
        let key = *self
            .keys
            .key_between(from, to)
            .ok_or_else(|| RunError::Protocol(format!("no key between {from} and {to}")))?;
        let ep = self.endpoints.get_mut(from).expect("endpoint per party");
        let f = ep.next_freshness(now, round);
        let env = ep
            .seal(&key, to, f, payload)
            .map_err(channel_err(format!("{from} -> {to}")))?;
        self.deliver(env, round)
    }

    fn deliver(&mut self, env: Envelope, round: u64) -> Result<Vec<u8>, RunError> {
        let now = self.now(round);
        let window = self.cfg.channel_window();
        let inbox = self.inboxes.get_mut(&env.receiver).expect("inbox per party");
        let out = inbox
            .receive(&self.keys, &env, window, now)
            .map_err(channel_err(format!("{} -> {}", env.sender, env.receiver)))?;
        if let Some(t) = self.trace.as_mut() {
            t.envelopes.push(env);
        }
        Ok(out)
    }

    /// Routes a submission through the sender's channel to the ledger and
    /// tries to append it.
    fn submit(&mut self, from: &str, rec: &SubmissionRecord, report: &mut RoundReport) -> Result<Submitted, RunError> {
        let round = rec.meta.round;
        let bytes = self.send(from, LEDGER, round, &rec.encode())?;
        let rec = SubmissionRecord::decode(&bytes).map_err(decode_err("ledger submission"))?;
        let rules = self.cfg.contract.clone();
        let cfg = AppendConfig {
            committee_size: self.cfg.validators.committee_size,
        };
        match append_block(
            &mut self.chain,
            &rec.as_submission(),
            &self.vset,
            &rules,
            &mut self.state,
            cfg,
        ) {
            Ok(_) => {
                report.blocks_appended += 1;
                if rec.meta.epsilon_charged > 0.0 {
                    *report.epsilon_charged.entry(rec.meta.party.clone()).or_default() += rec.meta.epsilon_charged;
                }
                if let Some(t) = self.trace.as_mut() {
                    t.submissions.push(rec);
                }
                Ok(Submitted::Appended)
            }
            Err(e) => {
                let reasons = match e {
                    LedgerError::Rejected(v) => v.iter().map(|v| v.to_string()).collect(),
                    LedgerError::Quorum { .. } => vec!["quorum".to_string()],
                    other => return Err(other.into()),
                };
                report.rejected.push(Rejection {
                    party: rec.meta.party.clone(),
                    kind: rec.meta.kind,
                    reasons: reasons.clone(),
                });
                Ok(Submitted::Rejected(reasons))
            }
        }
    }

    fn blank_report(&self, round: u64) -> Result<RoundReport, RunError> {
        let ev = evaluate(&self.global, &self.eval)?;
        Ok(RoundReport {
            round,
            status: RoundStatus::Completed,
            abort_reason: None,
            participants: Vec::new(),
            global_version: self.global.version,
            global_accuracy: ev.accuracy,
            global_loss: ev.mean_loss,
            global_fpr: ev.false_positive_rate,
            integrated_accuracy: None,
            integrated_fpr: None,
            global_local_fpr: None,
            epsilon_charged: BTreeMap::new(),
            blocks_appended: 0,
            rejected: Vec::new(),
            dropped: Vec::new(),
            agreement_rate: None,
            explanation_consistency: None,
            weights: BTreeMap::new(),
            attacks: None,
        })
    }

    fn abort(&self, mut report: RoundReport, reason: impl Into<String>) -> Result<RoundReport, RunError> {
        let ev = evaluate(&self.global, &self.eval)?;
        report.status = RoundStatus::Aborted;
        report.abort_reason = Some(reason.into());
        report.global_version = self.global.version;
        report.global_accuracy = ev.accuracy;
        report.global_loss = ev.mean_loss;
        report.global_fpr = ev.false_positive_rate;
        Ok(report)
    }

    fn round(&mut self, r: u64) -> Result<RoundReport, RunError> {
        let now = self.now(r);
        self.state.now = now;
        if self.record {
            self.trace = Some(RoundTrace {
                round: r,
                now,
                envelopes: Vec::new(),
                submissions: Vec::new(),
                premask: BTreeMap::new(),
                raw_updates: BTreeMap::new(),
                ledger_before: self.state.clone(),
            });
        }
        let mut report = self.blank_report(r)?;
        let threat = self.cfg.threat_at(r);
        let bounds = self.cfg.privacy.clone();
        let base = self.global.clone();
        let dim = base.dim() + 1;

        // participation is fixed before any training so masks can be derived
        let participants: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|k| {
                let eps = bounds.epsilon_for(self.sensitivity[*k], threat);
                self.state.budget.can_afford(k, eps)
            })
            .cloned()
            .collect();
        report.participants = participants.clone();
        if participants.is_empty() {
            return self.abort(report, "no node can afford its epsilon");
        }
        let n_round: u64 = participants.iter().map(|k| self.split(k).0.len() as u64).sum();

        // local training, adaptive privacy, clipping, noise, pre-weighting
        let mut local: BTreeMap<NodeId, NodeRound> = BTreeMap::new();
        let mut poison = PoisonSummary {
            injected: 0,
            rejected: 0,
        };
        for k in &participants {
            let (train, _) = self.split(k);
            let raw = train_local(&base, train, &self.cfg.train, self.seed("train", r, k))?;
            let history = self.loss_history.get_mut(k).expect("history per node");
            history.extend_from_slice(&raw.loss_trace);
            let ctx = assess_context(self.sensitivity[k], threat, history, &bounds)?;
            let mut clipped = clip_update(&raw, ctx.clip_norm)?;
            if let Some(f) = self.cfg.poison_nodes.get(k) {
                clipped = clipped.scaled(*f);
                poison.injected += 1;
            }
            let declared_norm = clipped.norm();
            let sigma = gaussian_sigma(ctx.clip_norm, ctx.delta, ctx.epsilon)?;
            let noised = add_dp_noise(&clipped, &ctx, self.seed("dp-noise", r, k))?;
            let weight = clipped.n_samples as f64 / n_round as f64;
            let weighted = noised.scaled(weight);
            local.insert(
                k.clone(),
                NodeRound {
                    raw,
                    premask: PreMask {
                        clipped,
                        sigma,
                        weight,
                        epsilon: ctx.epsilon,
                        mask: MaskVector {
                            node_id: k.clone(),
                            round: r,
                            values: Vec::new(),
                        },
                        freshness: FreshnessTag {
                            nonce: 0,
                            timestamp: now,
                            round: r,
                        },
                    },
                    weighted,
                    declared_norm,
                },
            );
        }

        // masking: the strength is public and shared by every participant
        let strength = round_strength(
            bounds.mask_strength_for(threat),
            bounds.clip_norm * bounds.stall_clip_factor,
        );
        let masks = derive_masks(
            derive_seed(self.cfg.seed, "round-mask", &[r]),
            r,
            &participants,
            dim,
            strength,
        )?;

        // mask, seal to the cloud, and log each update through the contract
        let mut admitted = Vec::with_capacity(participants.len());
        for k in &participants {
            let node = local.get_mut(k).expect("trained above");
            let f = self.endpoints.get_mut(k).expect("endpoint").next_freshness(now, r);
            let decl = Declaration {
                epsilon: node.premask.epsilon,
                update_norm: node.declared_norm,
            };
            let masked = apply_mask(&node.weighted, &masks[k], f, decl)?;
            node.premask.mask = masks[k].clone();
            node.premask.freshness = f;
            let key = self.keys.k_pc[k];
            let env = self
                .endpoints
                .get_mut(k)
                .expect("endpoint")
                .seal(&key, CLOUD, f, &masked.encode())
                .map_err(channel_err(format!("{k} -> cloud")))?;
            let bytes = self.deliver(env, r)?;
            let m = MaskedUpdate::decode(&bytes).map_err(decode_err("masked update"))?;
            let eps = m.declaration.epsilon;
            let rec = SubmissionRecord {
                meta: BlockMeta {
                    kind: BlockKind::LocalUpdate,
                    party: m.node_id.clone(),
                    round: r,
                    version: base.version,
                    freshness: m.freshness,
                    epsilon_charged: if eps.is_finite() { eps } else { 0.0 },
                    update_norm: m.declaration.update_norm,
                    n_samples: m.n_samples,
                },
                payload: m.body_bytes(),
                claimed_hash: m.payload_hash,
            };
            match self.submit(CLOUD, &rec, &mut report)? {
                Submitted::Appended => admitted.push(m),
                Submitted::Rejected(_) => {
                    if self.cfg.poison_nodes.contains_key(k) {
                        poison.rejected += 1;
                    }
                }
            }
        }
        if !self.cfg.poison_nodes.is_empty() {
            report.attacks = Some(poison);
        }
        if let Some(t) = self.trace.as_mut() {
            for (k, n) in &local {
                t.premask.insert(k.clone(), n.premask.clone());
                t.raw_updates.insert(k.clone(), n.raw.grad.clone());
            }
        }
        if !report.rejected.is_empty() {
            let who = report
                .rejected
                .iter()
                .map(|x| x.party.clone())
                .collect::<Vec<_>>()
                .join(", ");
            return self.abort(report, format!("updates rejected: {who}"));
        }

        // secure aggregation
        let (kept, dropped) = match preprocess_updates(&admitted, dim) {
            Ok(x) => x,
            Err(e) => return self.abort(report, e.to_string()),
        };
        if !dropped.is_empty() {
            report.dropped = dropped;
            return self.abort(report, "updates dropped; masks cannot cancel");
        }
        let sum = match smpc_sum(&kept, &participants) {
            Ok(s) => s,
            Err(e) => return self.abort(report, e.to_string()),
        };
        let mut g = global_from_delta(&base, sum, participants.clone(), n_round, r)?;
        let gp = self.cfg.global_privacy.clone();
        if let Some(eps) = gp.epsilon {
            g = privacy_adjust_global(
                &g,
                eps,
                gp.delta,
                gp.clip,
                derive_seed(self.cfg.seed, "global-noise", &[r]),
            )?;
        }

        // log the global model, then distribute it
        let global_bytes = g.params.encode();
        let f = self.endpoints.get_mut(CLOUD).expect("endpoint").next_freshness(now, r);
        let rec = SubmissionRecord {
            meta: BlockMeta {
                kind: BlockKind::GlobalModel,
                party: CLOUD.to_string(),
                round: r,
                version: g.params.version,
                freshness: f,
                epsilon_charged: if g.epsilon_global.is_finite() {
                    g.epsilon_global
                } else {
                    0.0
                },
                update_norm: l2_norm(&g.delta),
                n_samples: n_round,
            },
            payload: global_bytes.clone(),
            claimed_hash: canonical_hash(&global_bytes),
        };
        if let Submitted::Rejected(reasons) = self.submit(CLOUD, &rec, &mut report)? {
            return self.abort(report, format!("global model rejected: {}", reasons.join(", ")));
        }
        let logged = rec.claimed_hash;
        for k in self.nodes.clone() {
            let bytes = self.send(CLOUD, &k, r, &global_bytes)?;
            // the node checks what it received against the ledger entry
            if canonical_hash(&bytes) != logged {
                return Err(RunError::Protocol(format!(
                    "{k} received a global model that does not match the ledger"
                )));
            }
        }

        // dual-model validation and local correction
        let counts: Vec<u64> = participants
            .iter()
            .map(|k| local[k].premask.clipped.n_samples)
            .collect();
        let stats = GlobalStats {
            total_samples: n_round,
            diversity: sample_diversity(&counts, self.nodes.len()),
        };
        let mut feedback: BTreeMap<NodeId, FeedbackUpdate> = BTreeMap::new();
        let mut agreement = Vec::new();
        let mut consistency = Vec::new();
        for k in &participants {
            let (train, hold) = self.split(k);
            let model1 = base.with_delta(&local[k].raw.grad)?;
            let v = train_local(&base, hold, &self.cfg.train, self.seed("validator", r, k))?;
            let model2 = base.with_delta(&v.grad)?;
            let vs = &train[..train.len().min(self.cfg.integration.validate_samples)];
            let ecfg = ExplainConfig {
                n_repeats: self.cfg.integration.explain_repeats,
                seed: self.seed("explain", r, k),
            };
            let vr = validate_predictions(&model1, &model2, vs, &ecfg)?;
            let flagged: Vec<Sample> = vr.flagged.iter().map(|&i| vs[i].clone()).collect();
            let corr = local_correction(
                &model1,
                &flagged,
                hold,
                &self.cfg.integration.correction,
                vr.mean_stability(),
                self.seed("correction", r, k),
            )?;
            let x: Vec<f64> = local[k].raw.grad.iter().zip(&corr.delta).map(|(a, b)| a + b).collect();
            agreement.push(vr.agreement_rate);
            consistency.push(vr.explanation_consistency);
            self.explanations
                .extend(vr.explanations.iter().map(|e| ExplanationRecord {
                    round: r,
                    node: k.clone(),
                    sample: e.sample_id,
                    attributions: e.attributions.clone(),
                    stability: e.stability,
                }));
            feedback.insert(
                k.clone(),
                FeedbackUpdate {
                    delta: x,
                    quality: corr.quality,
                },
            );
        }
        report.agreement_rate = mean(&agreement);
        report.explanation_consistency = mean(&consistency);

        let icfg = self.cfg.integration.clone();
        let mut integrated_models: BTreeMap<NodeId, ModelParams> = BTreeMap::new();
        match icfg.site {
            IntegrationSite::Node => {
                for k in &participants {
                    let x = &feedback[k];
                    let w = compute_weights(&x.quality, &stats, icfg.w_min, icfg.n_ref)?;
                    let fin = integrate(x, &g.delta, &w)?;
                    let mut m = base.with_delta(&fin)?;
                    m.version = g.params.version;
                    let bytes = m.encode();
                    let f = self.endpoints.get_mut(k).expect("endpoint").next_freshness(now, r);
                    let rec = SubmissionRecord {
                        meta: BlockMeta {
                            kind: BlockKind::Feedback,
                            party: k.clone(),
                            round: r,
                            version: g.params.version,
                            freshness: f,
                            epsilon_charged: 0.0,
                            update_norm: l2_norm(&fin),
                            n_samples: local[k].premask.clipped.n_samples,
                        },
                        claimed_hash: canonical_hash(&bytes),
                        payload: bytes,
                    };
                    self.submit(k, &rec, &mut report)?;
                    report.weights.insert(k.clone(), w);
                    integrated_models.insert(k.clone(), m);
                }
                self.global = g.params.clone();
            }
            IntegrationSite::Cloud => {
                let m = self.cloud_integrate(
                    r,
                    &participants,
                    &local,
                    &feedback,
                    &g.delta,
                    &base,
                    &stats,
                    strength,
                    &mut report,
                )?;
                for k in &participants {
                    integrated_models.insert(k.clone(), m.clone());
                }
                for k in self.nodes.clone() {
                    self.send(CLOUD, &k, r, &m.encode())?;
                }
                self.global = m;
            }
        }

        let mut acc = Vec::new();
        let mut fpr = Vec::new();
        let mut gfpr = Vec::new();
        for k in &participants {
            let (_, hold) = self.split(k);
            let ei = evaluate(&integrated_models[k], hold)?;
            let eg = evaluate(&g.params, hold)?;
            acc.push(ei.accuracy);
            fpr.push(ei.false_positive_rate);
            gfpr.push(eg.false_positive_rate);
        }
        report.integrated_accuracy = mean(&acc);
        report.integrated_fpr = mean(&fpr);
        report.global_local_fpr = mean(&gfpr);
        let ev = evaluate(&g.params, &self.eval)?;
        report.global_version = g.params.version;
        report.global_accuracy = ev.accuracy;
        report.global_loss = ev.mean_loss;
        report.global_fpr = ev.false_positive_rate;
        Ok(report)
    }

    /// Cloud-side fusion. Feedback deltas travel masked and pre-weighted like
    /// training updates, so the cloud learns only their weighted mean.
    #[allow(clippy::too_many_arguments)]
    fn cloud_integrate(
        &mut self,
        r: u64,
        participants: &[NodeId],
        local: &BTreeMap<NodeId, NodeRound>,
        feedback: &BTreeMap<NodeId, FeedbackUpdate>,
        y: &[f64],
        base: &ModelParams,
        stats: &GlobalStats,
        strength: f64,
        report: &mut RoundReport,
    ) -> Result<ModelParams, RunError> {
        let now = self.now(r);
        let dim = y.len();
        let masks = derive_masks(
            derive_seed(self.cfg.seed, "feedback-mask", &[r]),
            r,
            participants,
            dim,
            strength,
        )?;
        let mut received = Vec::with_capacity(participants.len());
        let mut quality = FeedbackQuality {
            accuracy_gain: 0.0,
            explanation_stability: 0.0,
        };
        for k in participants {
            let x = &feedback[k];
            let n = local[k].premask.clipped.n_samples;
            let weight = local[k].premask.weight;
            let up = GradientUpdate {
                grad: x.delta.clone(),
                n_samples: n,
                loss_trace: Vec::new(),
            }
            .scaled(weight);
            let f = self.endpoints.get_mut(k).expect("endpoint").next_freshness(now, r);
            let decl = Declaration {
                epsilon: f64::INFINITY,
                update_norm: l2_norm(&x.delta),
            };
            let masked = apply_mask(&up, &masks[k], f, decl)?;
            let mut e = Encoder::new();
            e.bytes(&masked.encode())
                .f64(x.quality.accuracy_gain)
                .f64(x.quality.explanation_stability);
            let key = self.keys.k_pc[k];
            let env = self
                .endpoints
                .get_mut(k)
                .expect("endpoint")
                .seal(&key, CLOUD, f, &e.finish())
                .map_err(channel_err(format!("{k} -> cloud")))?;
            let bytes = self.deliver(env, r)?;
            let mut d = Decoder::new(&bytes);
            let m = d
                .bytes()
                .and_then(MaskedUpdate::decode)
                .map_err(decode_err("feedback update"))?;
            let gain = d.f64().map_err(decode_err("feedback quality"))?;
            let stab = d.f64().map_err(decode_err("feedback quality"))?;
            quality.accuracy_gain += weight * gain;
            quality.explanation_stability += weight * stab;
            received.push(m);
        }
        quality.explanation_stability = quality.explanation_stability.clamp(0.0, 1.0);
        let xbar = smpc_sum(&received, participants)?;
        let x = FeedbackUpdate { delta: xbar, quality };
        let icfg = &self.cfg.integration;
        let w = compute_weights(&x.quality, stats, icfg.w_min, icfg.n_ref)?;
        let fin = integrate(&x, y, &w)?;
        let mut m = base.with_delta(&fin)?;
        m.version = base.version + 1;
        let bytes = m.encode();
        let f = self.endpoints.get_mut(CLOUD).expect("endpoint").next_freshness(now, r);
        let rec = SubmissionRecord {
            meta: BlockMeta {
                kind: BlockKind::Feedback,
                party: CLOUD.to_string(),
                round: r,
                version: m.version,
                freshness: f,
                epsilon_charged: 0.0,
                update_norm: l2_norm(&fin),
                n_samples: stats.total_samples,
            },
            claimed_hash: canonical_hash(&bytes),
            payload: bytes,
        };
        self.submit(CLOUD, &rec, report)?;
        report.weights.insert(CLOUD.to_string(), w);
        Ok(m)
    }
}

/// Sum of per-round epsilon charges per party, for closure checks against
/// the budget ledger.
pub fn epsilon_totals(reports: &[RoundReport]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.epsilon_charged {
            *out.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    out
}

#[cfg(test)]
mod tests;
