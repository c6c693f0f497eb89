//! Synthetic vehicle telemetry.
//!
//! Each node draws Gaussian feature vectors with a node-specific spread on the
//! location column and (scaled by heterogeneity) a node-specific mean shift.
//! Labels come from a fixed random hyperplane and are flipped with a small
//! probability, so a perfect model tops out at `1 - label_noise` accuracy.
//! Label skew across nodes follows a two-class Dirichlet (Beta) draw whose
//! concentration shrinks as heterogeneity grows.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;

pub type NodeId = String;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("fleet needs at least one node")]
    NoNodes,
    #[error("samples_per_node must be positive")]
    NoSamples,
    #[error("feature_dim must be positive")]
    NoFeatures,
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("location feature {0} out of range")]
    BadLocationFeature(usize),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePartition {
    pub node_id: NodeId,
    pub samples: Vec<Sample>,
    pub sensitivity: f64,
}

impl NodePartition {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        pos as f64 / self.samples.len().max(1) as f64
    }

    /// Splits into (train, holdout) with the last `holdout_fraction` of samples
    /// held out. At least one sample always stays in train.
    pub fn split(&self, holdout_fraction: f64) -> (&[Sample], &[Sample]) {
        let n = self.samples.len();
        let hold = ((n as f64) * holdout_fraction).round() as usize;
        let hold = hold.min(n.saturating_sub(1));
        self.samples.split_at(n - hold)
    }
}

/// Ground-truth separating hyperplane used to label samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Hyperplane {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    fn reflect(&self, x: &mut [f64]) {
        let norm2: f64 = self.weights.iter().map(|w| w * w).sum();
        if norm2 == 0.0 {
            return;
        }
        let k = 2.0 * self.margin(x) / norm2;
        for (v, w) in x.iter_mut().zip(&self.weights) {
            *v -= k * w;
        }
    }
}

/// Per-node generative parameters, kept so held-out fleet data can be drawn
/// from the same mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub location_scale: f64,
    pub shift: Vec<f64>,
    pub target_positive_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetParams {
    pub seed: u64,
    pub n_nodes: usize,
    pub samples_per_node: usize,
    pub feature_dim: usize,
    pub heterogeneity: f64,
    pub label_noise: f64,
    pub location_feature: usize,
}

impl FleetParams {
    pub fn new(seed: u64, n_nodes: usize, samples_per_node: usize, feature_dim: usize, heterogeneity: f64) -> Self {
        Self {
            seed,
            n_nodes,
            samples_per_node,
            feature_dim,
            heterogeneity,
            label_noise: 0.05,
            location_feature: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetDataset {
    pub partitions: Vec<NodePartition>,
    pub feature_dim: usize,
    pub truth: Hyperplane,
    pub profiles: Vec<NodeProfile>,
    pub label_noise: f64,
    pub location_feature: usize,
}

pub fn node_name(k: usize) -> NodeId {
    format!("node-{k:03}")
}

/// Dirichlet concentration for a heterogeneity knob in (0, 1]: 100 at the
/// IID end down to 0.1 at full skew, geometric in between.
fn skew_concentration(h: f64) -> f64 {
    (100f64.ln() * (1.0 - h) + 0.1f64.ln() * h).exp()
}

pub fn generate_fleet(p: &FleetParams) -> Result<FleetDataset, DataError> {
    if p.n_nodes == 0 {
        return Err(DataError::NoNodes);
    }
    if p.samples_per_node == 0 {
        return Err(DataError::NoSamples);
    }
    if p.feature_dim == 0 {
        return Err(DataError::NoFeatures);
    }
    for (name, value) in [("heterogeneity", p.heterogeneity), ("label_noise", p.label_noise)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(DataError::OutOfRange { name, value });
        }
    }
    if p.location_feature >= p.feature_dim {
        return Err(DataError::BadLocationFeature(p.location_feature));
    }

    let mut rng = seed::stream(p.seed, "fleet-truth", &[]);
    let truth = Hyperplane {
        weights: (0..p.feature_dim).map(|_| rng.sample(StandardNormal)).collect(),
        bias: 0.0,
    };

    let mut partitions = Vec::with_capacity(p.n_nodes);
    let mut profiles = Vec::with_capacity(p.n_nodes);
    for k in 0..p.n_nodes {
        let mut rng = seed::stream(p.seed, "fleet-node", &[k as u64]);
        let location_scale = rng.random_range(0.1..1.0);
        let shift: Vec<f64> = (0..p.feature_dim)
            .map(|_| p.heterogeneity * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let target_positive_rate = if p.heterogeneity > 0.0 {
            let a = skew_concentration(p.heterogeneity);
            let beta = Beta::new(a, a).expect("positive concentration");
            Some(beta.sample(&mut rng))
        } else {
            None
        };
        let profile = NodeProfile {
            location_scale,
            shift,
            target_positive_rate,
        };

        let n = p.samples_per_node;
        let target_pos = target_positive_rate.map(|r| (r * n as f64).round() as usize);
        let (mut pos, mut neg) = (0usize, 0usize);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = draw_features(&mut rng, p.location_feature, &profile);
            let mut clean = truth.margin(&x) > 0.0;
            if let Some(tp) = target_pos {
                let full = if clean { pos >= tp } else { neg >= n - tp };
                if full {
                    truth.reflect(&mut x);
                    clean = !clean;
                }
            }
            if clean {
                pos += 1;
            } else {
                neg += 1;
            }
            let flip = rng.random::<f64>() < p.label_noise;
            samples.push(Sample {
                features: x,
                label: u8::from(clean ^ flip),
            });
        }
        partitions.push(NodePartition {
            node_id: node_name(k),
            samples,
            sensitivity: 0.0,
        });
        profiles.push(profile);
    }

    let scorer = SensitivityScorer::fit(&partitions, p.location_feature);
    for part in &mut partitions {
        part.sensitivity = scorer.score(part);
    }

    Ok(FleetDataset {
        partitions,
        feature_dim: p.feature_dim,
        truth,
        profiles,
        label_noise: p.label_noise,
        location_feature: p.location_feature,
    })
}

fn draw_features<R: Rng>(rng: &mut R, loc: usize, profile: &NodeProfile) -> Vec<f64> {
    profile
        .shift
        .iter()
        .enumerate()
        .map(|(j, mu)| {
            let z: f64 = rng.sample(StandardNormal);
            let z = if j == loc { z * profile.location_scale } else { z };
            z + mu
        })
        .collect()
}

impl FleetDataset {
    pub fn total_samples(&self) -> usize {
        self.partitions.iter().map(|p| p.samples.len()).sum()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.partitions.iter().map(|p| p.node_id.clone()).collect()
    }

    /// Held-out samples from the fleet-wide mixture (uniform over node
    /// profiles, natural label balance, same label noise).
    pub fn holdout(&self, seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = seed::stream(seed, "fleet-holdout", &[]);
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..self.profiles.len());
                let x = draw_features(&mut rng, self.location_feature, &self.profiles[k]);
                let clean = self.truth.margin(&x) > 0.0;
                let flip = rng.random::<f64>() < self.label_noise;
                Sample {
                    features: x,
                    label: u8::from(clean ^ flip),
                }
            })
            .collect()
    }

    /// Writes one JSON object per sample: `{node_id, features, label}`.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        for part in &self.partitions {
            for s in &part.samples {
                let rec = SampleRecord {
                    node_id: part.node_id.clone(),
                    features: s.features.clone(),
                    label: s.label,
                };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    node_id: NodeId,
    features: Vec<f64>,
    label: u8,
}

/// Reads partitions back from the JSON-lines dump. Node order follows first
/// appearance; sensitivities are recomputed against `location_feature`.
pub fn load_jsonl<R: BufRead>(r: R, location_feature: usize) -> Result<Vec<NodePartition>, DataError> {
    let mut parts: Vec<NodePartition> = Vec::new();
    let mut dim = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.label > 1 {
            return Err(DataError::Parse {
                line: i + 1,
                msg: format!("label {} is not 0 or 1", rec.label),
            });
        }
        match dim {
            None => dim = Some(rec.features.len()),
            Some(d) if d != rec.features.len() => {
                return Err(DataError::Parse {
                    line: i + 1,
                    msg: format!("expected {d} features, got {}", rec.features.len()),
                })
            }
            _ => {}
        }
        let sample = Sample {
            features: rec.features,
            label: rec.label,
        };
        match parts.iter_mut().find(|p| p.node_id == rec.node_id) {
            Some(p) => p.samples.push(sample),
            None => parts.push(NodePartition {
                node_id: rec.node_id,
                samples: vec![sample],
                sensitivity: 0.0,
            }),
        }
    }
    if let Some(d) = dim {
        if location_feature >= d {
            return Err(DataError::BadLocationFeature(location_feature));
        }
    }
    let scorer = SensitivityScorer::fit(&parts, location_feature);
    for p in &mut parts {
        p.sensitivity = scorer.score(p);
    }
    Ok(parts)
}

/// Population variance of one feature column.
pub fn column_variance(samples: &[Sample], col: usize) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.features[col]).sum::<f64>() / n;
    samples.iter().map(|s| (s.features[col] - mean).powi(2)).sum::<f64>() / n
}

/// Scores partitions by the variance of the location-like column divided by
/// the largest such variance in the fleet.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityScorer {
    pub location_feature: usize,
    pub max_variance: f64,
}

impl SensitivityScorer {
    pub fn fit(partitions: &[NodePartition], location_feature: usize) -> Self {
        let max_variance = partitions
            .iter()
            .map(|p| column_variance(&p.samples, location_feature))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        Self {
            location_feature,
            max_variance,
        }
    }

    pub fn score(&self, p: &NodePartition) -> f64 {
        let v = column_variance(&p.samples, self.location_feature);
        if !v.is_finite() {
            return 1.0;
        }
        if self.max_variance <= 0.0 {
            return 0.0;
        }
        (v / self.max_variance).clamp(0.0, 1.0)
    }
}

/// Distinct node ids; used to validate externally supplied partitions.
pub fn ensure_unique_ids(parts: &[NodePartition]) -> bool {
    let ids: BTreeSet<_> = parts.iter().map(|p| p.node_id.as_str()).collect();
    ids.len() == parts.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn part(id: &str, col: &[f64]) -> NodePartition {
        NodePartition {
            node_id: id.into(),
            samples: col
                .iter()
                .map(|v| Sample {
                    features: vec![*v, 1.0],
                    label: 0,
                })
                .collect(),
            sensitivity: 0.0,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let p = FleetParams::new(7, 1, 100, 4, 0.0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_fleet(&p).unwrap().dump_jsonl(&mut a).unwrap();
        generate_fleet(&p).unwrap().dump_jsonl(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn full_heterogeneity_skews_labels() {
        let fleet = generate_fleet(&FleetParams::new(7, 4, 50, 4, 1.0)).unwrap();
        let rates: Vec<f64> = fleet.partitions.iter().map(|p| p.positive_rate()).collect();
        let spread = rates.iter().cloned().fold(f64::MIN, f64::max) - rates.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.2, "rates {rates:?}");
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            generate_fleet(&FleetParams::new(7, 2, 0, 4, 0.0)),
            Err(DataError::NoSamples)
        ));
        assert!(matches!(
            generate_fleet(&FleetParams::new(7, 0, 5, 4, 0.0)),
            Err(DataError::NoNodes)
        ));
    }

    #[test]
    fn sample_count_and_shape() {
        let fleet = generate_fleet(&FleetParams::new(3, 5, 37, 6, 0.4)).unwrap();
        assert_eq!(fleet.total_samples(), 5 * 37);
        assert!(ensure_unique_ids(&fleet.partitions));
        for p in &fleet.partitions {
            assert!(p.samples.iter().all(|s| s.features.len() == 6 && s.label <= 1));
            assert!((0.0..=1.0).contains(&p.sensitivity));
        }
        let max = fleet.partitions.iter().map(|p| p.sensitivity).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn label_noise_ceiling_on_holdout() {
        let fleet = generate_fleet(&FleetParams::new(11, 2, 10, 5, 0.3)).unwrap();
        let hold = fleet.holdout(99, 20_000);
        let correct = hold
            .iter()
            .filter(|s| u8::from(fleet.truth.margin(&s.features) > 0.0) == s.label)
            .count();
        let acc = correct as f64 / hold.len() as f64;
        assert!((acc - 0.95).abs() < 0.01, "acc {acc}");
    }

    #[test]
    fn sensitivity_zero_max_and_mid() {
        let zero = part("a", &[0.0, 0.0, 0.0]);
        let mid = part("b", &[0.0, 1.0, 2.0]);
        let high = part("c", &[0.0, 2.0, 4.0]);
        let parts = vec![zero.clone(), mid.clone(), high.clone()];
        let s = SensitivityScorer::fit(&parts, 0);
        assert_eq!(s.score(&zero), 0.0);
        assert_eq!(s.score(&high), 1.0);
        // var(0,1,2) = 2/3, var(0,2,4) = 8/3
        assert!((s.score(&mid) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn jsonl_round_trip_preserves_samples() {
        let fleet = generate_fleet(&FleetParams::new(5, 3, 12, 3, 0.5)).unwrap();
        let mut buf = Vec::new();
        fleet.dump_jsonl(&mut buf).unwrap();
        let parts = load_jsonl(buf.as_slice(), 0).unwrap();
        assert_eq!(parts, fleet.partitions);
    }

    #[test]
    fn jsonl_rejects_unknown_keys_and_bad_labels() {
        let bad = br#"{"node_id":"a","features":[1.0],"label":0,"x":1}"#;
        assert!(load_jsonl(&bad[..], 0).is_err());
        let bad = br#"{"node_id":"a","features":[1.0],"label":2}"#;
        assert!(load_jsonl(&bad[..], 0).is_err());
    }

    proptest! {
        #[test]
        fn sensitivity_always_in_unit_interval(
            cols in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..20), 1..6),
            probe in prop::collection::vec(-1e6f64..1e6, 1..20),
        ) {
            let parts: Vec<_> = cols.iter().enumerate().map(|(i, c)| part(&i.to_string(), c)).collect();
            let s = SensitivityScorer::fit(&parts, 0);
            let v = s.score(&part("probe", &probe));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
