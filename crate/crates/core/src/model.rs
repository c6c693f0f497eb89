//! Logistic-regression learner run on every edge node.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::seed;
use crate::telemetry::Sample;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: model has {expected} features, input has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no samples to {0}")]
    Empty(&'static str),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("loss became non-finite at epoch {epoch} (last finite loss {last:?})")]
    Diverged { epoch: usize, last: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub version: u64,
}

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            version: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Weights followed by bias.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn with_delta(&self, delta: &[f64]) -> Result<Self, ModelError> {
        if delta.len() != self.dim() + 1 {
            return Err(ModelError::Dimension {
                expected: self.dim() + 1,
                got: delta.len(),
            });
        }
        let (dw, db) = delta.split_at(self.dim());
        Ok(Self {
            weights: self.weights.iter().zip(dw).map(|(w, d)| w + d).collect(),
            bias: self.bias + db[0],
            version: self.version,
        })
    }

    /// `self - other` as a flat weights-then-bias vector.
    pub fn delta_from(&self, other: &ModelParams) -> Vec<f64> {
        let mut d: Vec<f64> = self.weights.iter().zip(&other.weights).map(|(a, b)| a - b).collect();
        d.push(self.bias - other.bias);
        d
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.version).f64s(&self.weights).f64(self.bias);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let version = d.u64()?;
        let weights = d.f64s()?;
        let bias = d.f64()?;
        d.finish()?;
        Ok(Self { weights, bias, version })
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Unmasked training output: the parameter change plus how much data produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate {
    /// Weights delta followed by bias delta.
    pub grad: Vec<f64>,
    pub n_samples: u64,
    pub loss_trace: Vec<f64>,
}

impl GradientUpdate {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.grad)
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grad: self.grad.iter().map(|g| g * factor).collect(),
            n_samples: self.n_samples,
            loss_trace: self.loss_trace.clone(),
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on the raw score, written as softplus(s) - y*s.
pub fn log_loss(score: f64, label: u8) -> f64 {
    let softplus = score.max(0.0) + (-score.abs()).exp().ln_1p();
    softplus - f64::from(label) * score
}

pub fn predict(params: &ModelParams, x: &[f64]) -> Result<f64, ModelError> {
    params.check_dim(x)?;
    Ok(sigmoid(params.score(x)))
}

pub fn predict_label(params: &ModelParams, x: &[f64]) -> Result<u8, ModelError> {
    Ok(u8::from(predict(params, x)? >= 0.5))
}

/// Mean log-loss gradient over `samples`, weights then bias.
pub fn loss_gradient(params: &ModelParams, samples: &[&Sample]) -> Vec<f64> {
    let d = params.dim();
    let mut g = vec![0.0; d + 1];
    for s in samples {
        let r = sigmoid(params.score(&s.features)) - f64::from(s.label);
        for (gj, xj) in g[..d].iter_mut().zip(&s.features) {
            *gj += r * xj;
        }
        g[d] += r;
    }
    let n = samples.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

pub fn mean_loss(params: &ModelParams, samples: &[Sample]) -> f64 {
    samples
        .iter()
        .map(|s| log_loss(params.score(&s.features), s.label))
        .sum::<f64>()
        / samples.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 2,
            batch: 16,
        }
    }
}

/// Mini-batch SGD from `params`; returns the total parameter change.
///
/// `loss_trace[e]` is the mean log-loss over all samples after epoch `e`.
pub fn train_local(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GradientUpdate, ModelError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(ModelError::LearningRate(cfg.lr));
    }
    if cfg.epochs == 0 {
        return Err(ModelError::NonPositive("epochs"));
    }
    if cfg.batch == 0 {
        return Err(ModelError::NonPositive("batch"));
    }
    if samples.is_empty() {
        return Err(ModelError::Empty("train on"));
    }
    if let Some(s) = samples.iter().find(|s| s.features.len() != params.dim()) {
        return Err(ModelError::Dimension {
            expected: params.dim(),
            got: s.features.len(),
        });
    }

    let mut rng = seed::stream(seed, "sgd", &[]);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let g = loss_gradient(&current, &batch);
            let d = current.dim();
            for (w, gj) in current.weights.iter_mut().zip(&g[..d]) {
                *w -= cfg.lr * gj;
            }
            current.bias -= cfg.lr * g[d];
        }
        let loss = mean_loss(&current, samples);
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                last: loss_trace.last().copied(),
            });
        }
        loss_trace.push(loss);
    }

    Ok(GradientUpdate {
        grad: current.delta_from(params),
        n_samples: samples.len() as u64,
        loss_trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub false_positive_rate: f64,
}

/// Accuracy at threshold 0.5, mean log-loss, and false-positive rate
/// (0 when the set has no negatives).
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<Evaluation, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Empty("evaluate"));
    }
    let mut correct = 0usize;
    let mut fp = 0usize;
    let mut negatives = 0usize;
    let mut loss = 0.0;
    for s in samples {
        params.check_dim(&s.features)?;
        let score = params.score(&s.features);
        let pred = u8::from(sigmoid(score) >= 0.5);
        if pred == s.label {
            correct += 1;
        }
        if s.label == 0 {
            negatives += 1;
            if pred == 1 {
                fp += 1;
            }
        }
        loss += log_loss(score, s.label);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        false_positive_rate: if negatives == 0 {
            0.0
        } else {
            fp as f64 / negatives as f64
        },
    })
}
