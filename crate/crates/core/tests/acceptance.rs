//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every tolerance is a constant below.

use std::collections::BTreeMap;
use std::process::ExitCode;

use rand::Rng;
use rand_distr::StandardNormal;

use iovfl_core::adversary::{run_attack_suite, AttackKind};
use iovfl_core::aggregation::{fedavg, smpc_sum, WeightedDelta};
use iovfl_core::ledger::{flip_bit, BlockField, ValidatorSet};
use iovfl_core::masking::{apply_mask, derive_masks, Declaration};
use iovfl_core::model::{loss_gradient, mean_loss, train_local};
use iovfl_core::orchestrator::{run, write_artifacts, FleetConfig, RoundStatus, RunConfig};
use iovfl_core::privacy::{add_dp_noise, add_noise_vec, gaussian_sigma, PrivacyContext};
use iovfl_core::seed;
use iovfl_core::telemetry::{node_name, Sample};
use iovfl_core::xai::{
    explain, integrate, validate_predictions, ExplainConfig, FeedbackQuality, FeedbackUpdate, IntegrationWeights,
};
use iovfl_core::{verify_chain, ChainStatus, FreshnessTag, GradientUpdate, ModelParams, TrainConfig};

const MASK_TOL: f64 = 1e-9;
const FEDAVG_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const SIGMA_REL_TOL: f64 = 0.02;
const NOISE_DRAWS: usize = 100_000;
const ACCURACY_FLOOR: f64 = 0.90;
const MONOTONE_SLACK: f64 = 0.01;
const FPR_SLACK: f64 = 0.01;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const STAKE_FREQ_TOL: f64 = 0.01;
const COMMITTEE_DRAWS: u64 = 100_000;
const ZERO_ATTRIBUTION_MAX: f64 = 0.01;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_samples<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            features: (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            label: u8::from(rng.random_bool(0.5)),
        })
        .collect()
}

fn random_params<R: Rng>(rng: &mut R, d: usize) -> ModelParams {
    ModelParams {
        weights: (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        bias: rng.sample(StandardNormal),
        version: 0,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mask_cancellation() -> Outcome {
    let mut rng = seed::stream(101, "acceptance-masks", &[]);
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let n = rng.random_range(2..=32usize);
        let dim = rng.random_range(1..=64usize);
        let ids: Vec<String> = (0..n).map(node_name).collect();
        let strength = rng.random_range(1.0..100.0);
        let masks = derive_masks(rng.random(), case + 1, &ids, dim, strength).map_err(|e| e.to_string())?;
        let mut raw_sum = vec![0.0; dim];
        let mut masked = Vec::with_capacity(n);
        for (i, k) in ids.iter().enumerate() {
            let grad: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            raw_sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
            let u = GradientUpdate {
                grad,
                n_samples: 1,
                loss_trace: Vec::new(),
            };
            let f = FreshnessTag {
                nonce: i as u128,
                timestamp: 0,
                round: case + 1,
            };
            let decl = Declaration {
                epsilon: 1.0,
                update_norm: 0.0,
            };
            masked.push(apply_mask(&u, &masks[k], f, decl).map_err(|e| e.to_string())?);
        }
        let sum = smpc_sum(&masked, &ids).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&sum, &raw_sum));
    }
    check(
        worst <= MASK_TOL,
        format!("100 cases, max |masked sum - raw sum| = {worst:.3e} (tol {MASK_TOL:e})"),
    )
}

fn fedavg_oracle() -> Outcome {
    let mut rng = seed::stream(102, "acceptance-fedavg", &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=10usize);
        let base = random_params(&mut rng, d);
        let nodes = rng.random_range(2..=6usize);
        let lr = 0.3;
        let mut pooled = Vec::new();
        let mut deltas = Vec::new();
        for k in 0..nodes {
            let n = rng.random_range(5..=60usize);
            let s = random_samples(&mut rng, n, d);
            let cfg = TrainConfig {
                lr,
                epochs: 1,
                batch: n,
            };
            let u = train_local(&base, &s, &cfg, 0).map_err(|e| e.to_string())?;
            deltas.push(WeightedDelta {
                node_id: node_name(k),
                delta: u.grad,
                n_samples: u.n_samples,
            });
            pooled.extend(s);
        }
        let g = fedavg(&deltas, &base, 1).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            lr,
            epochs: 1,
            batch: pooled.len(),
        };
        let central = train_local(&base, &pooled, &cfg, 0).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&g.delta, &central.grad));
    }
    check(
        worst <= FEDAVG_TOL,
        format!("20 federations, max |fedavg - central| = {worst:.3e} (tol {FEDAVG_TOL:e})"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = seed::stream(103, "acceptance-grad", &[]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=12usize);
        let n = rng.random_range(1..=40usize);
        let p = random_params(&mut rng, d);
        let s = random_samples(&mut rng, n, d);
        let refs: Vec<&Sample> = s.iter().collect();
        let analytic = loss_gradient(&p, &refs);
        let mut numeric = vec![0.0; d + 1];
        for (j, g) in numeric.iter_mut().enumerate() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            if j < d {
                hi.weights[j] += FD_STEP;
                lo.weights[j] -= FD_STEP;
            } else {
                hi.bias += FD_STEP;
                lo.bias -= FD_STEP;
            }
            *g = (mean_loss(&hi, &s) - mean_loss(&lo, &s)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = iovfl_core::model::l2_norm(&analytic)
            .max(iovfl_core::model::l2_norm(&numeric))
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    check(
        worst < GRAD_REL_TOL,
        format!("100 cases, max relative error {worst:.3e} (tol {GRAD_REL_TOL:e})"),
    )
}

fn dp_calibration() -> Outcome {
    let delta = 1e-5;
    let sigma = gaussian_sigma(1.0, delta, 1.0).map_err(|e| e.to_string())?;
    let formula = (2.0 * (1.25f64 / delta).ln()).sqrt();
    let draws = add_noise_vec(&vec![0.0; NOISE_DRAWS], sigma, 104);
    let mean = draws.iter().sum::<f64>() / NOISE_DRAWS as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (NOISE_DRAWS - 1) as f64;
    let rel = (var.sqrt() - sigma).abs() / sigma;

    let u = GradientUpdate {
        grad: vec![0.1, -3.5, f64::MIN_POSITIVE, 1e300],
        n_samples: 7,
        loss_trace: vec![0.5],
    };
    let ctx = PrivacyContext {
        epsilon: f64::INFINITY,
        delta,
        clip_norm: 1.0,
        mask_strength: 5.0,
        threat_level: 0.1,
        sensitivity: 0.2,
        clip_relaxed: false,
    };
    let passthrough = add_dp_noise(&u, &ctx, 9).map_err(|e| e.to_string())?;
    let identical = passthrough
        .grad
        .iter()
        .zip(&u.grad)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        sigma == formula && rel <= SIGMA_REL_TOL && identical,
        format!(
            "sigma = {sigma:.6} (closed form {formula:.6}), empirical std off by {:.3}% (tol {}%), eps=inf passthrough bit-identical: {identical}",
            rel * 100.0,
            SIGMA_REL_TOL * 100.0
        ),
    )
}

fn baseline_config(rounds: u64) -> RunConfig {
    RunConfig {
        rounds,
        ..RunConfig::default()
    }
}

fn tamper_evidence() -> Outcome {
    // noise off so no node exhausts its budget: 6 rounds of 9 blocks
    let mut cfg = baseline_config(6);
    cfg.privacy.noise_enabled = false;
    let out = run(&cfg).map_err(|e| e.to_string())?;
    let mut chain = out.chain.clone();
    if chain.len() < 50 {
        return Err(format!("baseline chain has only {} blocks", chain.len()));
    }
    chain.blocks.truncate(50);
    if verify_chain(&chain) != ChainStatus::Valid {
        return Err("untampered 50-block chain fails verification".into());
    }
    let mut rng = seed::stream(105, "acceptance-tamper", &[]);
    let (mut total, mut caught) = (0usize, 0usize);
    for k in 0..chain.len() {
        for field in BlockField::ALL {
            let len = field.bit_len(&chain.blocks[k]);
            if len == 0 {
                continue;
            }
            for _ in 0..10 {
                let mut bad = chain.clone();
                flip_bit(&mut bad.blocks[k], field, rng.random_range(0..len));
                total += 1;
                caught += usize::from(verify_chain(&bad) == ChainStatus::FirstBadIndex(k));
            }
        }
    }
    check(
        caught == total,
        format!("{caught}/{total} single-bit mutations flagged at the mutated block"),
    )
}

fn attack_suite() -> Outcome {
    let mut cfg = baseline_config(6);
    cfg.attack.injections_per_kind = 100;
    let reports = run_attack_suite(&cfg, &[1]).map_err(|e| e.to_string())?;
    let wire = [
        AttackKind::Replay,
        AttackKind::TamperMessage,
        AttackKind::SpoofNode,
        AttackKind::Impersonate,
        AttackKind::MitmSwap,
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &reports {
        if wire.contains(&r.kind) {
            ok &= r.injected == 100 && r.detected == 100 && r.successful_opens == 0 && r.appended == 0;
        }
        ok &= r.passed();
        parts.push(format!("{} {}/{}", r.kind, r.detected, r.injected));
    }
    check(ok && reports.len() == AttackKind::ALL.len(), parts.join(", "))
}

fn learning_sanity() -> Outcome {
    let mut cfg = baseline_config(50);
    cfg.privacy.noise_enabled = false;
    let out = run(&cfg).map_err(|e| e.to_string())?;
    let last = out.reports.last().ok_or("no rounds")?;
    check(
        last.global_accuracy >= ACCURACY_FLOOR,
        format!(
            "held-out accuracy {:.4} after 50 rounds (floor {ACCURACY_FLOOR})",
            last.global_accuracy
        ),
    )
}

fn privacy_utility() -> Outcome {
    let mut means = Vec::new();
    for eps_max in [8.0, 2.0, 1.0, 0.5] {
        let mut acc = 0.0;
        for s in SEEDS {
            let mut cfg = baseline_config(20);
            cfg.seed = s;
            cfg.fleet.n_nodes = 10;
            cfg.privacy.epsilon_max = eps_max;
            cfg.privacy.epsilon_min = f64::min(0.5, eps_max);
            cfg.contract.epsilon_cap = 1e6;
            let out = run(&cfg).map_err(|e| e.to_string())?;
            acc += out.reports.last().ok_or("no rounds")?.global_accuracy;
        }
        means.push((eps_max, acc / SEEDS.len() as f64));
    }
    let rises: Vec<f64> = means.windows(2).map(|w| w[1].1 - w[0].1).filter(|d| *d > 0.0).collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= MONOTONE_SLACK);
    let desc: Vec<String> = means.iter().map(|(e, a)| format!("eps_max {e}: {a:.4}")).collect();
    check(ok, desc.join(", "))
}

fn weighted_integration() -> Outcome {
    let x = FeedbackUpdate {
        delta: vec![1.0, 2.0, -3.0],
        quality: FeedbackQuality {
            accuracy_gain: 0.0,
            explanation_stability: 1.0,
        },
    };
    let y = [4.0, 5.0, 6.0];
    let w = IntegrationWeights {
        w_local: 0.25,
        w_global: 0.75,
    };
    let got = integrate(&x, &y, &w).map_err(|e| e.to_string())?;
    let exact = got == vec![3.25, 4.25, 3.75];

    let mut weights_ok = true;
    let (mut fpr_int, mut fpr_glob) = (0.0, 0.0);
    for s in SEEDS {
        let mut cfg = baseline_config(20);
        cfg.seed = s;
        let out = run(&cfg).map_err(|e| e.to_string())?;
        let done: Vec<_> = out
            .reports
            .iter()
            .filter(|r| r.status == RoundStatus::Completed)
            .collect();
        if done.is_empty() {
            return Err(format!("seed {s}: no completed rounds"));
        }
        for r in &out.reports {
            weights_ok &= r
                .weights
                .values()
                .all(|w| (w.w_local + w.w_global - 1.0).abs() <= WEIGHT_SUM_TOL);
        }
        fpr_int += done.iter().filter_map(|r| r.integrated_fpr).sum::<f64>() / done.len() as f64;
        fpr_glob += done.iter().filter_map(|r| r.global_local_fpr).sum::<f64>() / done.len() as f64;
    }
    let n = SEEDS.len() as f64;
    let (fi, fg) = (fpr_int / n, fpr_glob / n);
    check(
        exact && weights_ok && fi <= fg + FPR_SLACK,
        format!("hand-computed fusion exact: {exact}, weights sum to 1: {weights_ok}, FPR integrated {fi:.4} vs global {fg:.4} (slack {FPR_SLACK})"),
    )
}

fn determinism() -> Outcome {
    let cfg = baseline_config(5);
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = run(&cfg).map_err(|e| e.to_string())?;
    let rb = run(&cfg).map_err(|e| e.to_string())?;
    write_artifacts(&ra, a.path()).map_err(|e| e.to_string())?;
    write_artifacts(&rb, b.path()).map_err(|e| e.to_string())?;
    let mut same = true;
    for f in ["metrics.jsonl", "summary.csv", "explanations.jsonl", "chain.json"] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        same &= x == y;
    }
    let heads = ra.chain.head_hash() == rb.chain.head_hash();
    check(
        same && heads,
        format!("artifacts byte-identical: {same}, chain head {}", ra.chain.head_hash()),
    )
}

fn committee_statistics() -> Outcome {
    let stakes: BTreeMap<String, f64> = [("a", 1.0), ("b", 1.0), ("c", 2.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let vset = ValidatorSet::new(&stakes, 2.0 / 3.0, 111).map_err(|e| e.to_string())?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for i in 0..COMMITTEE_DRAWS {
        let c = vset.select_committee(i, 1).map_err(|e| e.to_string())?;
        *counts.entry(c[0].clone()).or_default() += 1;
    }
    let mut worst = 0.0f64;
    let mut desc = Vec::new();
    for (k, s) in &stakes {
        let f = *counts.get(k).unwrap_or(&0) as f64 / COMMITTEE_DRAWS as f64;
        worst = worst.max((f - s / 4.0).abs());
        desc.push(format!("{k} {f:.4}"));
    }
    check(
        worst <= STAKE_FREQ_TOL,
        format!(
            "{} (expected 0.25/0.25/0.50, max deviation {worst:.4})",
            desc.join(", ")
        ),
    )
}

fn xai_sanity() -> Outcome {
    let mut rng = seed::stream(112, "acceptance-xai", &[]);
    let d = 6;
    let mut params = random_params(&mut rng, d);
    params.weights[2] = 0.0;
    let samples = random_samples(&mut rng, 50, d);
    let background: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let mut worst = 0.0f64;
    for (i, s) in samples.iter().enumerate() {
        let e = explain(&params, i, &s.features, &background, 20, i as u64).map_err(|e| e.to_string())?;
        worst = worst.max(e.attributions[2]);
    }
    let report =
        validate_predictions(&params, &params, &samples, &ExplainConfig::default()).map_err(|e| e.to_string())?;
    check(
        worst < ZERO_ATTRIBUTION_MAX && report.agreement_rate == 1.0 && report.flagged.is_empty(),
        format!(
            "max zero-weight attribution {worst:.2e} (max {ZERO_ATTRIBUTION_MAX}), identical models agreement {} with {} flagged",
            report.agreement_rate,
            report.flagged.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("mask cancellation", mask_cancellation),
        ("fedavg oracle equivalence", fedavg_oracle),
        ("gradient correctness", gradient_correctness),
        ("dp noise calibration", dp_calibration),
        ("tamper evidence", tamper_evidence),
        ("replay/mitm/spoof suite", attack_suite),
        ("learning sanity", learning_sanity),
        ("privacy-utility monotonicity", privacy_utility),
        ("weighted integration", weighted_integration),
        ("determinism", determinism),
        ("pos committee statistics", committee_statistics),
        ("xai sanity", xai_sanity),
    ];
    // keep the default fleet honest: criterion 7 assumes 4 x 200, dim 8
    let f = FleetConfig::default();
    assert_eq!((f.n_nodes, f.samples_per_node, f.feature_dim), (4, 200, 8));

    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = std::time::Instant::now();
        let (verdict, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {verdict} {name}: {detail} [{:.1}s]",
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {}/{} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
