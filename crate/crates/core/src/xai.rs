//! Dual-model explanation and feedback.
//!
//! Model 1 is the node's freshly trained predictor, Model 2 a validator
//! trained on the node's held-out split. Explanations are permutation
//! importances: for each feature, how far the predicted probability moves
//! when that feature is replaced by a value drawn from a background row.
//! Samples where the two models disagree on the label or on the top feature
//! drive a local correction, and the correction is fused with the global
//! update by a convex weighting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{evaluate, predict, train_local, ModelError, ModelParams, TrainConfig};
use crate::seed;
use crate::telemetry::{NodeId, Sample};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum XaiError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("no samples to validate")]
    NoSamples,
    #[error("n_repeats must be positive")]
    NoRepeats,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{name} = {value} is out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    Permutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: usize,
    pub attributions: Vec<f64>,
    pub method: ExplainMethod,
    /// In [0, 1]; 1 means the repeats agree exactly.
    pub stability: f64,
}

impl Explanation {
    /// Index of the largest attribution; ties go to the lowest index.
    pub fn top_feature(&self) -> usize {
        let mut best = 0;
        for (j, a) in self.attributions.iter().enumerate() {
            if *a > self.attributions[best] {
                best = j;
            }
        }
        best
    }
}

/// Permutation importance of each feature of `x`.
///
/// Repeat `r` substitutes from one background row, drawn without replacement
/// and reshuffled after every full pass over the background.
///
/// `stability = 1 - min(1, Σ_j se_j / Σ_j mean_j)` where `se_j` is the
/// standard error of feature `j`'s attribution over the repeats. A model
/// whose attributions are all zero is perfectly stable.
pub fn explain(
    params: &ModelParams,
    sample_id: usize,
    x: &[f64],
    background: &[&[f64]],
    n_repeats: usize,
    rng_seed: u64,
) -> Result<Explanation, XaiError> {
    if background.is_empty() {
        return Err(XaiError::EmptyBackground);
    }
    if n_repeats == 0 {
        return Err(XaiError::NoRepeats);
    }
    let d = params.dim();
    for row in std::iter::once(x).chain(background.iter().copied()) {
        if row.len() != d {
            return Err(XaiError::Dimension {
                expected: d,
                got: row.len(),
            });
        }
    }
    let p0 = predict(params, x)?;
    let mut rng = seed::stream(rng_seed, "explain", &[]);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut probe = x.to_vec();
    let mut order: Vec<usize> = (0..background.len()).collect();
    for r in 0..n_repeats {
        if r % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let row = background[order[r % order.len()]];
        for j in 0..d {
            let keep = std::mem::replace(&mut probe[j], row[j]);
            let a = (p0 - predict(params, &probe)?).abs();
            probe[j] = keep;
            sum[j] += a;
            sum_sq[j] += a * a;
        }
    }
    let r = n_repeats as f64;
    let attributions: Vec<f64> = sum.iter().map(|s| s / r).collect();
    let total_mean: f64 = attributions.iter().sum();
    let total_se: f64 = if n_repeats < 2 {
        0.0
    } else {
        attributions
            .iter()
            .zip(&sum_sq)
            .map(|(m, sq)| {
                let var = ((sq - r * m * m) / (r - 1.0)).max(0.0);
                (var / r).sqrt()
            })
            .sum()
    };
    let stability = if total_mean <= 0.0 {
        1.0
    } else {
        1.0 - (total_se / total_mean).min(1.0)
    };
    Ok(Explanation {
        sample_id,
        attributions,
        method: ExplainMethod::Permutation,
        stability,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { n_repeats: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub agreement_rate: f64,
    /// Indices into the validated sample list, ascending.
    pub flagged: Vec<usize>,
    pub explanation_consistency: f64,
    /// Model 1's explanation for every validated sample.
    pub explanations: Vec<Explanation>,
}

impl ValidationReport {
    pub fn mean_stability(&self) -> f64 {
        if self.explanations.is_empty() {
            return 1.0;
        }
        self.explanations.iter().map(|e| e.stability).sum::<f64>() / self.explanations.len() as f64
    }
}

/// Compares both models sample by sample. Both explanations of a sample use
/// the same random draws, so identical models never disagree. The samples
/// themselves serve as the background.
pub fn validate_predictions(
    model1: &ModelParams,
    model2: &ModelParams,
    samples: &[Sample],
    cfg: &ExplainConfig,
) -> Result<ValidationReport, XaiError> {
    if samples.is_empty() {
        return Err(XaiError::NoSamples);
    }
    if model1.dim() != model2.dim() {
        return Err(XaiError::Dimension {
            expected: model1.dim(),
            got: model2.dim(),
        });
    }
    let background: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let mut agree = 0usize;
    let mut consistent = 0usize;
    let mut flagged = Vec::new();
    let mut explanations = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let p1 = predict(model1, &s.features)? >= 0.5;
        let p2 = predict(model2, &s.features)? >= 0.5;
        let es = seed::derive_seed(cfg.seed, "validate-explain", &[i as u64]);
        let e1 = explain(model1, i, &s.features, &background, cfg.n_repeats, es)?;
        let e2 = explain(model2, i, &s.features, &background, cfg.n_repeats, es)?;
        let same_top = e1.top_feature() == e2.top_feature();
        agree += usize::from(p1 == p2);
        consistent += usize::from(same_top);
        if p1 != p2 || !same_top {
            flagged.push(i);
        }
        explanations.push(e1);
    }
    let n = samples.len() as f64;
    Ok(ValidationReport {
        agreement_rate: agree as f64 / n,
        flagged,
        explanation_consistency: consistent as f64 / n,
        explanations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackQuality {
    pub accuracy_gain: f64,
    pub explanation_stability: f64,
}

/// The local feedback update `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackUpdate {
    pub delta: Vec<f64>,
    pub quality: FeedbackQuality,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub lr: f64,
    /// Full-batch gradient steps over the flagged samples.
    pub steps: usize,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { lr: 0.1, steps: 5 }
    }
}

/// Full-batch gradient descent on the flagged samples only. The gain is
/// measured on `holdout`; with nothing flagged the delta and gain are zero.
pub fn local_correction(
    model1: &ModelParams,
    flagged: &[Sample],
    holdout: &[Sample],
    cfg: &CorrectionConfig,
    explanation_stability: f64,
    rng_seed: u64,
) -> Result<FeedbackUpdate, XaiError> {
    if !(0.0..=1.0).contains(&explanation_stability) {
        return Err(XaiError::OutOfRange {
            name: "explanation_stability",
            value: explanation_stability,
        });
    }
    let zero = FeedbackUpdate {
        delta: vec![0.0; model1.dim() + 1],
        quality: FeedbackQuality {
            accuracy_gain: 0.0,
            explanation_stability,
        },
    };
    if flagged.is_empty() || cfg.steps == 0 {
        return Ok(zero);
    }
    let train = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.steps,
        batch: flagged.len(),
    };
    let delta = train_local(model1, flagged, &train, rng_seed)?.grad;
    let accuracy_gain = if holdout.is_empty() {
        0.0
    } else {
        let corrected = model1.with_delta(&delta)?;
        evaluate(&corrected, holdout)?.accuracy - evaluate(model1, holdout)?.accuracy
    };
    Ok(FeedbackUpdate {
        delta,
        quality: FeedbackQuality {
            accuracy_gain,
            explanation_stability,
        },
    })
}

/// Convex weights for `w_L · x + w_G · y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationWeights {
    pub w_local: f64,
    pub w_global: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub total_samples: u64,
    pub diversity: f64,
}

/// Normalized entropy of the contributors' sample shares, relative to a
/// uniform spread over the whole fleet. Zero for a fleet of one.
pub fn sample_diversity(counts: &[u64], fleet_size: usize) -> f64 {
    let total: u64 = counts.iter().sum();
    if fleet_size < 2 || total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (h / (fleet_size as f64).ln()).clamp(0.0, 1.0)
}

/// Clamps the local share of `score_l / (score_l + score_g)` into
/// `[w_min, 1 - w_min]`. Two zero scores give `(w_min, 1 - w_min)`.
pub fn weights_from_scores(score_l: f64, score_g: f64, w_min: f64) -> IntegrationWeights {
    let total = score_l + score_g;
    let raw = if total > 0.0 { score_l / total } else { 0.0 };
    let w_local = raw.clamp(w_min, 1.0 - w_min);
    IntegrationWeights {
        w_local,
        w_global: 1.0 - w_local,
    }
}

/// Local score rewards corrections that helped and explained consistently;
/// the global score grows with the aggregate's sample count and diversity,
/// saturating around `n_ref` samples.
pub fn compute_weights(
    quality: &FeedbackQuality,
    global: &GlobalStats,
    w_min: f64,
    n_ref: f64,
) -> Result<IntegrationWeights, XaiError> {
    if !(w_min > 0.0 && w_min < 0.5) {
        return Err(XaiError::OutOfRange {
            name: "w_min",
            value: w_min,
        });
    }
    if !(n_ref > 0.0 && n_ref.is_finite()) {
        return Err(XaiError::OutOfRange {
            name: "n_ref",
            value: n_ref,
        });
    }
    if !(0.0..=1.0).contains(&global.diversity) {
        return Err(XaiError::OutOfRange {
            name: "diversity",
            value: global.diversity,
        });
    }
    if !(0.0..=1.0).contains(&quality.explanation_stability) || !quality.accuracy_gain.is_finite() {
        return Err(XaiError::OutOfRange {
            name: "quality",
            value: quality.accuracy_gain,
        });
    }
    let score_l = quality.accuracy_gain.max(0.0) * quality.explanation_stability;
    let score_g = global.diversity * (1.0 + global.total_samples as f64).ln() / (1.0 + n_ref).ln();
    Ok(weights_from_scores(score_l, score_g, w_min))
}

/// `w_L · x + w_G · y`, coordinate-wise.
pub fn integrate(x: &FeedbackUpdate, y: &[f64], w: &IntegrationWeights) -> Result<Vec<f64>, XaiError> {
    if x.delta.len() != y.len() {
        return Err(XaiError::Dimension {
            expected: x.delta.len(),
            got: y.len(),
        });
    }
    if !((w.w_local + w.w_global - 1.0).abs() <= 1e-12 && (0.0..=1.0).contains(&w.w_local)) {
        return Err(XaiError::OutOfRange {
            name: "w_local",
            value: w.w_local,
        });
    }
    Ok(x.delta
        .iter()
        .zip(y)
        .map(|(a, b)| w.w_local * a + w.w_global * b)
        .collect())
}

/// One line of the per-round explanation export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub round: u64,
    pub node: NodeId,
    pub sample: usize,
    pub attributions: Vec<f64>,
    pub stability: f64,
}
