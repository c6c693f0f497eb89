//! Adaptive privacy: context-to-parameter mapping, clipping, the Gaussian
//! mechanism, and per-node budget accounting under basic composition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{l2_norm, GradientUpdate};
use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PrivacyError {
    #[error("{name} = {value} is out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("update contains non-finite values")]
    NonFinite,
    #[error("node {node} would spend {would} of a {cap} budget")]
    OverBudget { node: String, would: f64, cap: f64 },
}

/// Tuning bounds for the context mapping. `noise_enabled = false` pins epsilon
/// to infinity (no noise, no budget charge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyBounds {
    pub noise_enabled: bool,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub mask_strength_min: f64,
    pub mask_strength_max: f64,
    /// Relative loss improvement over the last five epochs below which the
    /// clip bound is relaxed.
    pub stall_threshold: f64,
    pub stall_clip_factor: f64,
}

impl Default for PrivacyBounds {
    fn default() -> Self {
        Self {
            noise_enabled: true,
            epsilon_min: 0.5,
            epsilon_max: 8.0,
            delta: 1e-5,
            clip_norm: 1.0,
            mask_strength_min: 5.0,
            mask_strength_max: 20.0,
            stall_threshold: 0.01,
            stall_clip_factor: 1.5,
        }
    }
}

impl PrivacyBounds {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        let pos = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(PrivacyError::OutOfRange { name, value })
            }
        };
        pos("epsilon_min", self.epsilon_min)?;
        pos("epsilon_max", self.epsilon_max)?;
        pos("clip_norm", self.clip_norm)?;
        pos("mask_strength_min", self.mask_strength_min)?;
        pos("mask_strength_max", self.mask_strength_max)?;
        pos("stall_clip_factor", self.stall_clip_factor)?;
        if self.epsilon_min > self.epsilon_max {
            return Err(PrivacyError::OutOfRange {
                name: "epsilon_min",
                value: self.epsilon_min,
            });
        }
        if self.mask_strength_min > self.mask_strength_max {
            return Err(PrivacyError::OutOfRange {
                name: "mask_strength_min",
                value: self.mask_strength_min,
            });
        }
        check_delta(self.delta)
    }

    /// Epsilon for a (sensitivity, threat) pair; the stricter signal wins.
    pub fn epsilon_for(&self, sensitivity: f64, threat: f64) -> f64 {
        if !self.noise_enabled {
            return f64::INFINITY;
        }
        self.epsilon_min + (self.epsilon_max - self.epsilon_min) * (1.0 - sensitivity.max(threat))
    }

    pub fn mask_strength_for(&self, threat: f64) -> f64 {
        self.mask_strength_min + (self.mask_strength_max - self.mask_strength_min) * threat
    }
}

fn check_delta(delta: f64) -> Result<(), PrivacyError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(PrivacyError::Delta(delta))
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), PrivacyError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PrivacyError::OutOfRange { name, value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyContext {
    /// `f64::INFINITY` disables noise.
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub mask_strength: f64,
    pub threat_level: f64,
    pub sensitivity: f64,
    pub clip_relaxed: bool,
}

/// True when the last five losses improved by less than `threshold`
/// relative to the first of them.
pub fn convergence_stalled(loss_trace: &[f64], threshold: f64) -> bool {
    if loss_trace.len() < 5 {
        return false;
    }
    let window = &loss_trace[loss_trace.len() - 5..];
    let first = window[0];
    let last = window[4];
    if first == 0.0 {
        return true;
    }
    (first - last) / first.abs() < threshold
}

pub fn assess_context(
    sensitivity: f64,
    threat: f64,
    loss_trace: &[f64],
    bounds: &PrivacyBounds,
) -> Result<PrivacyContext, PrivacyError> {
    check_unit("sensitivity", sensitivity)?;
    check_unit("threat", threat)?;
    if loss_trace.iter().any(|l| !l.is_finite()) {
        return Err(PrivacyError::NonFinite);
    }
    bounds.validate()?;
    let stalled = convergence_stalled(loss_trace, bounds.stall_threshold);
    Ok(PrivacyContext {
        epsilon: bounds.epsilon_for(sensitivity, threat),
        delta: bounds.delta,
        clip_norm: if stalled {
            bounds.clip_norm * bounds.stall_clip_factor
        } else {
            bounds.clip_norm
        },
        mask_strength: bounds.mask_strength_for(threat),
        threat_level: threat,
        sensitivity,
        clip_relaxed: stalled,
    })
}

pub fn clip_vector(v: &[f64], clip_norm: f64) -> Result<Vec<f64>, PrivacyError> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(PrivacyError::OutOfRange {
            name: "clip_norm",
            value: clip_norm,
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PrivacyError::NonFinite);
    }
    let norm = l2_norm(v);
    if norm <= clip_norm {
        return Ok(v.to_vec());
    }
    let scale = clip_norm / norm;
    let mut out: Vec<f64> = v.iter().map(|x| x * scale).collect();
    // rounding can land a hair above the bound; shave it
    let after = l2_norm(&out);
    if after > clip_norm {
        let fix = clip_norm / after;
        out.iter_mut().for_each(|x| *x *= fix);
    }
    Ok(out)
}

pub fn clip_update(update: &GradientUpdate, clip_norm: f64) -> Result<GradientUpdate, PrivacyError> {
    Ok(GradientUpdate {
        grad: clip_vector(&update.grad, clip_norm)?,
        n_samples: update.n_samples,
        loss_trace: update.loss_trace.clone(),
    })
}

/// Gaussian-mechanism scale `clip * sqrt(2 ln(1.25/delta)) / epsilon`;
/// zero when epsilon is infinite.
pub fn gaussian_sigma(clip_norm: f64, delta: f64, epsilon: f64) -> Result<f64, PrivacyError> {
    check_delta(delta)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(PrivacyError::OutOfRange {
            name: "epsilon",
            value: epsilon,
        });
    }
    if epsilon.is_infinite() {
        return Ok(0.0);
    }
    Ok(clip_norm * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Adds i.i.d. N(0, sigma^2) to each coordinate. `sigma == 0` returns the
/// input unchanged.
pub fn add_noise_vec(v: &[f64], sigma: f64, rng_seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    let mut rng = seed::stream(rng_seed, "gaussian-noise", &[]);
    v.iter()
        .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn add_dp_noise(
    update: &GradientUpdate,
    ctx: &PrivacyContext,
    rng_seed: u64,
) -> Result<GradientUpdate, PrivacyError> {
    let sigma = gaussian_sigma(ctx.clip_norm, ctx.delta, ctx.epsilon)?;
    if !update.is_finite() {
        return Err(PrivacyError::NonFinite);
    }
    Ok(GradientUpdate {
        grad: add_noise_vec(&update.grad, sigma, rng_seed),
        n_samples: update.n_samples,
        loss_trace: update.loss_trace.clone(),
    })
}

/// Cumulative epsilon per node under simple (linear) composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub spent: BTreeMap<String, f64>,
    pub cap: f64,
}

impl BudgetLedger {
    pub fn new(cap: f64) -> Self {
        Self {
            spent: BTreeMap::new(),
            cap,
        }
    }

    pub fn spent(&self, node: &str) -> f64 {
        self.spent.get(node).copied().unwrap_or(0.0)
    }

    pub fn can_afford(&self, node: &str, epsilon: f64) -> bool {
        epsilon.is_infinite() || self.spent(node) + epsilon <= self.cap
    }

    /// Adds `epsilon` to the node's spend. Infinite epsilon (noise disabled)
    /// is charge-free. The ledger is untouched on error.
    pub fn charge(&mut self, node: &str, epsilon: f64) -> Result<f64, PrivacyError> {
        if epsilon.is_infinite() && epsilon > 0.0 {
            return Ok(self.spent(node));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(PrivacyError::OutOfRange {
                name: "epsilon",
                value: epsilon,
            });
        }
        let would = self.spent(node) + epsilon;
        if would > self.cap {
            return Err(PrivacyError::OverBudget {
                node: node.to_string(),
                would,
                cap: self.cap,
            });
        }
        self.spent.insert(node.to_string(), would);
        Ok(would)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upd(g: &[f64]) -> GradientUpdate {
        GradientUpdate {
            grad: g.to_vec(),
            n_samples: 1,
            loss_trace: vec![0.5],
        }
    }

    #[test]
    fn epsilon_boundaries_and_midpoint() {
        let b = PrivacyBounds::default();
        assert_eq!(assess_context(0.0, 0.0, &[], &b).unwrap().epsilon, 8.0);
        assert_eq!(assess_context(1.0, 0.3, &[], &b).unwrap().epsilon, 0.5);
        assert_eq!(assess_context(1.0, 0.0, &[], &b).unwrap().epsilon, 0.5);
        let ctx = assess_context(0.5, 0.2, &[], &b).unwrap();
        assert!((ctx.epsilon - 4.25).abs() < 1e-12);
        // 5 + 15 * 0.2
        assert!((ctx.mask_strength - 8.0).abs() < 1e-12);
    }

    #[test]
    fn noise_disabled_means_infinite_epsilon() {
        let b = PrivacyBounds {
            noise_enabled: false,
            ..Default::default()
        };
        assert!(assess_context(0.9, 0.9, &[], &b).unwrap().epsilon.is_infinite());
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let b = PrivacyBounds::default();
        assert!(assess_context(1.1, 0.0, &[], &b).is_err());
        assert!(assess_context(0.0, -0.1, &[], &b).is_err());
        assert!(assess_context(0.0, 0.0, &[f64::NAN], &b).is_err());
    }

    #[test]
    fn stalled_convergence_relaxes_clip() {
        let b = PrivacyBounds::default();
        let flat = [1.0, 0.999, 0.998, 0.997, 0.996];
        let ctx = assess_context(0.0, 0.0, &flat, &b).unwrap();
        assert!(ctx.clip_relaxed);
        assert_eq!(ctx.clip_norm, 1.5);
        let falling = [1.0, 0.9, 0.8, 0.7, 0.6];
        assert!(!assess_context(0.0, 0.0, &falling, &b).unwrap().clip_relaxed);
        assert!(!assess_context(0.0, 0.0, &flat[..4], &b).unwrap().clip_relaxed);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_update(&upd(&[3.0, 4.0, 0.0]), 5.0).unwrap().grad,
            vec![3.0, 4.0, 0.0]
        );
        let c = clip_update(&upd(&[6.0, 8.0, 0.0]), 5.0).unwrap().grad;
        assert!((c[0] - 3.0).abs() < 1e-15 && (c[1] - 4.0).abs() < 1e-15 && c[2] == 0.0);
        assert_eq!(clip_update(&upd(&[0.0; 3]), 5.0).unwrap().grad, vec![0.0; 3]);
        assert_eq!(clip_update(&upd(&[f64::INFINITY]), 1.0), Err(PrivacyError::NonFinite));
    }

    #[test]
    fn sigma_reference_value() {
        let s = gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        // sqrt(2 * ln(125000)) evaluated independently
        assert!((s - 4.844805262605389).abs() < 1e-12);
        assert_eq!(gaussian_sigma(1.0, 1e-5, f64::INFINITY).unwrap(), 0.0);
        assert!(gaussian_sigma(1.0, 0.0, 1.0).is_err());
        assert!(gaussian_sigma(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn infinite_epsilon_is_bitwise_passthrough() {
        let b = PrivacyBounds {
            noise_enabled: false,
            ..Default::default()
        };
        let ctx = assess_context(0.3, 0.1, &[], &b).unwrap();
        let u = upd(&[0.1, -0.2, 1e-300]);
        let out = add_dp_noise(&u, &ctx, 5).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.grad), bits(&u.grad));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let ctx = assess_context(0.0, 0.0, &[], &PrivacyBounds::default()).unwrap();
        let u = upd(&[0.0; 4]);
        assert_eq!(add_dp_noise(&u, &ctx, 3).unwrap(), add_dp_noise(&u, &ctx, 3).unwrap());
        assert_ne!(add_dp_noise(&u, &ctx, 3).unwrap(), add_dp_noise(&u, &ctx, 4).unwrap());
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let sigma = gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        let n = 100_000;
        let draws = add_noise_vec(&vec![0.0; n], sigma, 2024);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn budget_examples() {
        let mut l = BudgetLedger::new(10.0);
        assert_eq!(l.charge("a", 4.25).unwrap(), 4.25);

        let mut l = BudgetLedger::new(10.0);
        l.charge("a", 9.0).unwrap();
        assert!(matches!(l.charge("a", 4.25), Err(PrivacyError::OverBudget { .. })));
        assert_eq!(l.spent("a"), 9.0);

        let mut l = BudgetLedger::new(10.0);
        assert!(l.charge("a", 3.0).is_ok());
        assert!(l.charge("a", 3.0).is_ok());
        assert!(l.charge("a", 3.0).is_ok());
        assert!(l.charge("a", 3.0).is_err());
        assert_eq!(l.spent("a"), 9.0);

        let mut l = BudgetLedger::new(1.0);
        assert_eq!(l.charge("a", f64::INFINITY).unwrap(), 0.0);
        assert!(l.charge("a", 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(v in prop::collection::vec(-1e6f64..1e6, 1..40), c in 1e-6f64..1e3) {
            let out = clip_vector(&v, c).unwrap();
            prop_assert!(l2_norm(&out) <= c + 1e-12);
            if l2_norm(&v) <= c { prop_assert_eq!(out, v); }
        }

        #[test]
        fn epsilon_monotone_in_sensitivity_and_threat(s in 0.0f64..=1.0, t in 0.0f64..=1.0, ds in 0.0f64..=1.0, dt in 0.0f64..=1.0) {
            let b = PrivacyBounds::default();
            let e0 = b.epsilon_for(s, t);
            let e1 = b.epsilon_for((s + ds).min(1.0), (t + dt).min(1.0));
            prop_assert!(e1 <= e0 + 1e-12);
            prop_assert!(e0 >= b.epsilon_min - 1e-12 && e0 <= b.epsilon_max + 1e-12);
        }

        #[test]
        fn budget_monotone_and_capped(charges in prop::collection::vec((0usize..3, 0.01f64..5.0), 0..60)) {
            let mut l = BudgetLedger::new(20.0);
            let nodes = ["a", "b", "c"];
            for (k, eps) in charges {
                let before = l.spent(nodes[k]);
                let res = l.charge(nodes[k], eps);
                let after = l.spent(nodes[k]);
                prop_assert!(after >= before);
                prop_assert!(after <= l.cap);
                if res.is_err() { prop_assert_eq!(after, before); }
            }
        }
    }
}
