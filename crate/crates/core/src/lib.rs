//! Deterministic simulator of privacy-preserving federated learning across a
//! vehicle fleet: masked secure aggregation, adaptive differential privacy,
//! an attested hash-chain ledger, authenticated channels, dual-model
//! explanation feedback, and an adversary harness.

pub mod adversary;
pub mod aggregation;
pub mod channel;
pub mod codec;
pub mod ledger;
pub mod masking;
pub mod model;
pub mod orchestrator;
pub mod privacy;
pub mod seed;
pub mod telemetry;
pub mod xai;

pub use adversary::{run_attack_suite, AttackKind, AttackReport};
pub use aggregation::GlobalUpdate;
pub use channel::{Envelope, FreshnessTag, KeyRegistry};
pub use codec::Digest;
pub use ledger::{verify_chain, Chain, ChainStatus, ContractRules, LedgerBlock};
pub use masking::MaskedUpdate;
pub use model::{GradientUpdate, ModelParams, TrainConfig};
pub use orchestrator::{run, RoundReport, RunConfig, RunError, RunOutput};
pub use privacy::{BudgetLedger, PrivacyBounds, PrivacyContext};
pub use telemetry::{NodeId, Sample};
pub use xai::{Explanation, ExplanationRecord, IntegrationWeights};
