//! Fixtures and benchmark bodies for the hot paths: mask derivation, masked
//! summation, ledger append and verification, and local training.

use std::collections::BTreeMap;

use criterion::{black_box, BenchmarkId, Criterion};

use iovfl_core::channel::FreshnessTag;
use iovfl_core::codec::canonical_hash;
use iovfl_core::ledger::{
    append_block, AppendConfig, BlockKind, BlockMeta, ContractRules, LedgerState, Submission, ValidatorSet,
};
use iovfl_core::masking::{apply_mask, derive_masks, Declaration};
use iovfl_core::model::train_local;
use iovfl_core::telemetry::{generate_fleet, node_name, FleetParams};
use iovfl_core::{
    aggregation::smpc_sum, verify_chain, Chain, GradientUpdate, MaskedUpdate, ModelParams, NodeId, TrainConfig,
};

pub fn nodes(n: usize) -> Vec<NodeId> {
    (0..n).map(node_name).collect()
}

/// One masked update per node, each with a constant gradient.
pub fn masked_updates(n: usize, dim: usize) -> Vec<MaskedUpdate> {
    let ids = nodes(n);
    let masks = derive_masks(7, 1, &ids, dim, 16.0).expect("valid participants");
    ids.iter()
        .enumerate()
        .map(|(i, k)| {
            let u = GradientUpdate {
                grad: vec![i as f64 * 0.01; dim],
                n_samples: 100,
                loss_trace: Vec::new(),
            };
            let f = FreshnessTag {
                nonce: i as u128 + 1,
                timestamp: 10,
                round: 1,
            };
            let decl = Declaration {
                epsilon: 1.0,
                update_norm: 0.5,
            };
            apply_mask(&u, &masks[k], f, decl).expect("matching dimensions")
        })
        .collect()
}

pub fn validators() -> ValidatorSet {
    let stakes: BTreeMap<String, f64> = [
        ("val-0", 1.0),
        ("val-1", 1.0),
        ("val-2", 2.0),
        ("val-3", 1.0),
        ("val-4", 1.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ValidatorSet::new(&stakes, 2.0 / 3.0, 11).expect("valid stakes")
}

/// A chain of `n` blocks after genesis, every block a global-model entry.
pub fn chain_of(n: usize) -> Chain {
    let vset = validators();
    let rules = ContractRules {
        epsilon_cap: f64::MAX,
        ..ContractRules::default()
    };
    let mut state = LedgerState::new(f64::MAX);
    let mut chain = Chain::genesis(canonical_hash(b"genesis"));
    for i in 0..n as u64 {
        let payload = i.to_be_bytes();
        state.now = i;
        let sub = Submission {
            meta: BlockMeta {
                kind: BlockKind::GlobalModel,
                party: "cloud".into(),
                round: i + 1,
                version: i + 1,
                freshness: FreshnessTag {
                    nonce: u128::from(i) + 1,
                    timestamp: i,
                    round: i + 1,
                },
                epsilon_charged: 0.0,
                update_norm: 0.0,
                n_samples: 1,
            },
            payload: &payload,
            claimed_hash: canonical_hash(&payload),
        };
        append_block(
            &mut chain,
            &sub,
            &vset,
            &rules,
            &mut state,
            AppendConfig { committee_size: 3 },
        )
        .expect("honest append");
    }
    chain
}

pub fn bench_masks(c: &mut Criterion) {
    let mut g = c.benchmark_group("derive_masks");
    for n in [4usize, 16, 32] {
        let ids = nodes(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &ids, |b, ids| {
            b.iter(|| derive_masks(black_box(3), 1, ids, 64, 16.0).unwrap())
        });
    }
    g.finish();
}

pub fn bench_smpc_sum(c: &mut Criterion) {
    let mut g = c.benchmark_group("smpc_sum");
    for n in [4usize, 16, 32] {
        let ups = masked_updates(n, 64);
        let ids = nodes(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &ups, |b, ups| {
            b.iter(|| smpc_sum(black_box(ups), &ids).unwrap())
        });
    }
    g.finish();
}

pub fn bench_ledger(c: &mut Criterion) {
    c.bench_function("ledger_append_50", |b| b.iter(|| chain_of(black_box(50))));
    let chain = chain_of(50);
    c.bench_function("verify_chain_50", |b| b.iter(|| verify_chain(black_box(&chain))));
}

pub fn bench_train(c: &mut Criterion) {
    let data = generate_fleet(&FleetParams::new(5, 1, 200, 8, 0.3)).expect("valid fleet");
    let samples = &data.partitions[0].samples;
    let params = ModelParams::zeros(8);
    let cfg = TrainConfig::default();
    c.bench_function("train_local_200x8", |b| {
        b.iter(|| train_local(black_box(&params), samples, &cfg, 9).unwrap())
    });
}
