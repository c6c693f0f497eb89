use super::*;
use crate::ledger::{provenance_query, verify_chain, ChainStatus};

fn small(rounds: u64) -> RunConfig {
    RunConfig {
        rounds,
        fleet: FleetConfig {
            n_nodes: 3,
            samples_per_node: 80,
            feature_dim: 4,
            eval_samples: 300,
            ..FleetConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn zero_rounds_leaves_genesis_only() {
    let out = run(&small(0)).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.chain.len(), 1);
    assert_eq!(out.final_model, ModelParams::zeros(4));
}

#[test]
fn completed_round_appends_locals_global_and_feedback() {
    let out = run(&small(2)).unwrap();
    assert_eq!(verify_chain(&out.chain), ChainStatus::Valid);
    for r in &out.reports {
        assert_eq!(r.status, RoundStatus::Completed, "{r:?}");
        assert_eq!(r.blocks_appended, 3 + 1 + 3);
        assert_eq!(r.weights.len(), 3);
        for w in r.weights.values() {
            assert!((w.w_local + w.w_global - 1.0).abs() <= 1e-12);
        }
    }
    assert_eq!(out.chain.len(), 1 + 2 * 7);
    assert_eq!(out.final_model.version, 2);
    let lineage = provenance_query(&out.chain, 2).unwrap();
    assert_eq!(lineage.len(), 7);
    assert!(lineage.iter().all(|b| b.meta.round == 2));
}

#[test]
fn workflow_order_holds_per_round() {
    let out = run(&small(3)).unwrap();
    for round in 1..=3 {
        let idx = |kind: BlockKind| -> Vec<usize> {
            out.chain
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.meta.round == round && b.meta.kind == kind)
                .map(|(i, _)| i)
                .collect()
        };
        let locals = idx(BlockKind::LocalUpdate);
        let global = idx(BlockKind::GlobalModel);
        let fb = idx(BlockKind::Feedback);
        assert_eq!(global.len(), 1);
        assert!(locals.iter().all(|i| *i < global[0]));
        assert!(fb.iter().all(|i| *i > global[0]));
        assert!(!locals.is_empty() && !fb.is_empty());
    }
}

#[test]
fn epsilon_charges_close_against_the_budget() {
    let out = run(&small(4)).unwrap();
    let totals = epsilon_totals(&out.reports);
    assert_eq!(totals.len(), 3);
    for (k, v) in &totals {
        assert_eq!(*v, out.budget.spent(k));
        assert!(*v > 0.0);
    }
}

#[test]
fn exhausted_budget_stops_participation() {
    let mut cfg = small(6);
    cfg.contract.epsilon_cap = 10.0;
    cfg.privacy.epsilon_min = 4.0;
    cfg.privacy.epsilon_max = 4.0;
    let out = run(&cfg).unwrap();
    // 4 per round against a cap of 10: two rounds each, then nobody
    assert_eq!(out.reports[1].participants.len(), 3);
    assert!(out.reports[2].participants.is_empty());
    assert_eq!(out.reports[2].status, RoundStatus::Aborted);
    for k in out.budget.spent.keys() {
        assert_eq!(out.budget.spent(k), 8.0);
    }
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let cfg = small(2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_artifacts(&run(&cfg).unwrap(), a.path()).unwrap();
    write_artifacts(&run(&cfg).unwrap(), b.path()).unwrap();
    for f in [
        "metrics.jsonl",
        "summary.csv",
        "chain.json",
        "explanations.jsonl",
        "config.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, y, "{f}");
    }
    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    write_artifacts(&run(&other).unwrap(), c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("chain.json")).unwrap(),
        std::fs::read(c.path().join("chain.json")).unwrap()
    );
}

#[test]
fn explanations_round_trip_through_disk() {
    let out = run(&small(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();
    let back = read_explanations(dir.path()).unwrap();
    assert_eq!(back, out.explanations);
    // 56 training samples per node, under the 64-sample validation cap
    assert_eq!(back.len(), 3 * 56);
}

#[test]
fn poisoned_node_aborts_rounds() {
    let mut cfg = small(2);
    cfg.poison_nodes.insert("node-001".into(), 100.0);
    let out = run(&cfg).unwrap();
    for r in &out.reports {
        assert_eq!(r.status, RoundStatus::Aborted);
        assert_eq!(
            r.attacks,
            Some(PoisonSummary {
                injected: 1,
                rejected: 1
            })
        );
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].reasons, vec!["norm_bound".to_string()]);
        assert_eq!(r.global_version, 0);
    }
    assert_eq!(out.final_model.version, 0);
    assert_eq!(verify_chain(&out.chain), ChainStatus::Valid);
}

#[test]
fn cloud_site_logs_one_feedback_block() {
    let mut cfg = small(2);
    cfg.integration.site = IntegrationSite::Cloud;
    let out = run(&cfg).unwrap();
    for r in &out.reports {
        assert_eq!(r.status, RoundStatus::Completed);
        assert_eq!(r.blocks_appended, 3 + 1 + 1);
        assert_eq!(r.weights.keys().collect::<Vec<_>>(), vec!["cloud"]);
    }
    assert_eq!(out.final_model.version, 2);
}

#[test]
fn global_noise_is_charged_to_the_cloud() {
    let mut cfg = small(2);
    cfg.global_privacy.epsilon = Some(5.0);
    let out = run(&cfg).unwrap();
    assert_eq!(out.budget.spent(CLOUD), 10.0);
    assert_eq!(epsilon_totals(&out.reports)[CLOUD], 10.0);
}

#[test]
fn traced_run_records_wire_and_submissions() {
    let out = run_traced(&small(2)).unwrap();
    assert_eq!(out.traces.len(), 2);
    let t = &out.traces[0];
    assert_eq!(t.submissions.len(), 7);
    assert_eq!(t.premask.len(), 3);
    // updates to cloud, cloud to ledger, global to nodes, feedback to ledger
    assert_eq!(t.envelopes.len(), 3 + 4 + 3 + 3);
}
