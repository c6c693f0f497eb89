//! Run configuration. JSON, unknown keys rejected, every field defaulted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ledger::{ContractRules, ValidatorSet};
use crate::model::TrainConfig;
use crate::privacy::PrivacyBounds;
use crate::telemetry::{node_name, FleetParams, NodeId};
use crate::xai::CorrectionConfig;

/// Overrides [`RunConfig::output_dir`] when set.
pub const OUT_DIR_ENV: &str = "IOVFL_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub n_nodes: usize,
    pub samples_per_node: usize,
    pub feature_dim: usize,
    /// 0 is IID; 1 is maximal label and covariate skew.
    pub heterogeneity: f64,
    pub label_noise: f64,
    /// Share of each partition held out for the validator model and for
    /// measuring correction gains.
    pub holdout_fraction: f64,
    /// Size of the fleet-wide evaluation set.
    pub eval_samples: usize,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_nodes: 4,
            samples_per_node: 200,
            feature_dim: 8,
            heterogeneity: 0.3,
            label_noise: 0.05,
            holdout_fraction: 0.3,
            eval_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidatorConfig {
    pub stakes: BTreeMap<String, f64>,
    pub quorum_fraction: f64,
    pub committee_size: usize,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            stakes: [
                ("val-0", 1.0),
                ("val-1", 1.0),
                ("val-2", 2.0),
                ("val-3", 1.0),
                ("val-4", 1.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            quorum_fraction: 2.0 / 3.0,
            committee_size: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationSite {
    /// Each node fuses its own feedback with the global update; the next
    /// round starts from the plain global model.
    #[default]
    Node,
    /// The cloud fuses the sample-weighted mean feedback and the result
    /// becomes the next round's base model.
    Cloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub site: IntegrationSite,
    pub w_min: f64,
    /// Sample count at which the global score saturates.
    pub n_ref: f64,
    pub correction: CorrectionConfig,
    pub explain_repeats: usize,
    /// Training samples per node run through dual-model validation.
    pub validate_samples: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            site: IntegrationSite::Node,
            w_min: 0.05,
            n_ref: 1000.0,
            correction: CorrectionConfig::default(),
            explain_repeats: 10,
            validate_samples: 64,
        }
    }
}

/// Noise added by the cloud to the aggregate. Disabled when `epsilon` is null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalPrivacyConfig {
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub clip: f64,
}

impl Default for GlobalPrivacyConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            delta: 1e-5,
            clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub injections_per_kind: usize,
    pub poison_factor: f64,
    /// Scale used to probe just above an honest update; expected to pass.
    pub boundary_factor: f64,
    /// Baseline seeds; each gets its own honest run.
    pub seeds: Vec<u64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            injections_per_kind: 100,
            poison_factor: 100.0,
            boundary_factor: 1.01,
            seeds: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: u64,
    /// Simulated clock ticks between round starts.
    pub ticks_per_round: u64,
    pub fleet: FleetConfig,
    pub train: TrainConfig,
    pub privacy: PrivacyBounds,
    pub contract: ContractRules,
    pub validators: ValidatorConfig,
    pub integration: IntegrationConfig,
    pub global_privacy: GlobalPrivacyConfig,
    /// Threat level per round, starting at round 1. Missing rounds use 0.1.
    pub threat_levels: Vec<f64>,
    /// Nodes whose trainer is compromised, with the factor applied to their
    /// clipped update before masking.
    pub poison_nodes: BTreeMap<NodeId, f64>,
    pub output_dir: PathBuf,
    pub attack: AttackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 20,
            ticks_per_round: 10,
            fleet: FleetConfig::default(),
            train: TrainConfig::default(),
            privacy: PrivacyBounds::default(),
            contract: ContractRules::default(),
            validators: ValidatorConfig::default(),
            integration: IntegrationConfig::default(),
            global_privacy: GlobalPrivacyConfig::default(),
            threat_levels: Vec::new(),
            poison_nodes: BTreeMap::new(),
            output_dir: PathBuf::from("out"),
            attack: AttackConfig::default(),
        }
    }
}

pub const DEFAULT_THREAT: f64 = 0.1;

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn threat_at(&self, round: u64) -> f64 {
        usize::try_from(round.saturating_sub(1))
            .ok()
            .and_then(|i| self.threat_levels.get(i).copied())
            .unwrap_or(DEFAULT_THREAT)
    }

    pub fn fleet_params(&self) -> FleetParams {
        let f = &self.fleet;
        let mut p = FleetParams::new(self.seed, f.n_nodes, f.samples_per_node, f.feature_dim, f.heterogeneity);
        p.label_noise = f.label_noise;
        p
    }

    /// Freshness window for channel messages, in ticks.
    pub fn channel_window(&self) -> u64 {
        self.ticks_per_round
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.fleet;
        if f.n_nodes == 0 {
            return Err(invalid("fleet.n_nodes", "must be at least 1"));
        }
        if f.samples_per_node < 2 {
            return Err(invalid("fleet.samples_per_node", "must be at least 2"));
        }
        if f.feature_dim == 0 {
            return Err(invalid("fleet.feature_dim", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&f.heterogeneity) {
            return Err(invalid("fleet.heterogeneity", "must lie in [0, 1]"));
        }
        if !(0.0..0.5).contains(&f.label_noise) {
            return Err(invalid("fleet.label_noise", "must lie in [0, 0.5)"));
        }
        let hold = ((f.samples_per_node as f64) * f.holdout_fraction).round() as usize;
        if !(f.holdout_fraction > 0.0 && f.holdout_fraction < 1.0) || hold == 0 || hold >= f.samples_per_node {
            return Err(invalid("fleet.holdout_fraction", "must leave both splits non-empty"));
        }
        if f.eval_samples == 0 {
            return Err(invalid("fleet.eval_samples", "must be at least 1"));
        }
        if self.ticks_per_round == 0 {
            return Err(invalid("ticks_per_round", "must be at least 1"));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.epochs == 0 || t.batch == 0 {
            return Err(invalid("train", "lr must be positive, epochs and batch at least 1"));
        }
        self.privacy.validate().map_err(|e| invalid("privacy", e.to_string()))?;
        let c = &self.contract;
        if !positive(c.epsilon_cap) || !positive(c.max_update_norm) || c.max_declared_samples == 0 {
            return Err(invalid("contract", "caps must be positive"));
        }
        if c.freshness_window < self.ticks_per_round {
            return Err(invalid("contract.freshness_window", "must cover at least one round"));
        }
        ValidatorSet::new(&self.validators.stakes, self.validators.quorum_fraction, 0)
            .map_err(|e| invalid("validators", e.to_string()))?;
        if self.validators.committee_size == 0 || self.validators.committee_size > self.validators.stakes.len() {
            return Err(invalid(
                "validators.committee_size",
                "must be between 1 and the number of validators",
            ));
        }
        let i = &self.integration;
        if !(i.w_min > 0.0 && i.w_min < 0.5) {
            return Err(invalid("integration.w_min", "must lie in (0, 0.5)"));
        }
        if !(i.n_ref > 0.0 && i.n_ref.is_finite()) {
            return Err(invalid("integration.n_ref", "must be positive"));
        }
        if !(i.correction.lr > 0.0 && i.correction.lr.is_finite()) {
            return Err(invalid("integration.correction.lr", "must be positive"));
        }
        if i.explain_repeats == 0 || i.validate_samples == 0 {
            return Err(invalid(
                "integration",
                "explain_repeats and validate_samples must be at least 1",
            ));
        }
        let g = &self.global_privacy;
        if let Some(e) = g.epsilon {
            if !positive(e) {
                return Err(invalid("global_privacy.epsilon", "must be positive or null"));
            }
        }
        if !(g.delta > 0.0 && g.delta < 1.0) || !(g.clip > 0.0 && g.clip.is_finite()) {
            return Err(invalid(
                "global_privacy",
                "delta must lie in (0, 1) and clip be positive",
            ));
        }
        if let Some(t) = self.threat_levels.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid("threat_levels", format!("{t} is outside [0, 1]")));
        }
        let names: Vec<NodeId> = (0..f.n_nodes).map(node_name).collect();
        for (node, factor) in &self.poison_nodes {
            if !names.contains(node) {
                return Err(invalid("poison_nodes", format!("unknown node {node}")));
            }
            if !(factor.is_finite() && *factor > 0.0) {
                return Err(invalid("poison_nodes", format!("factor for {node} must be positive")));
            }
        }
        let a = &self.attack;
        if a.injections_per_kind == 0 || a.seeds.is_empty() {
            return Err(invalid("attack", "needs at least one injection and one seed"));
        }
        if !(a.poison_factor > 0.0 && a.poison_factor.is_finite())
            || !(a.boundary_factor > 0.0 && a.boundary_factor.is_finite())
        {
            return Err(invalid("attack", "factors must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"roundz": 3}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"fleet": {"nodes": 3}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn out_of_range_values_rejected() {
        for bad in [
            r#"{"fleet": {"n_nodes": 0}}"#,
            r#"{"fleet": {"heterogeneity": 1.5}}"#,
            r#"{"fleet": {"holdout_fraction": 0.0}}"#,
            r#"{"privacy": {"epsilon_min": 9.0}}"#,
            r#"{"validators": {"quorum_fraction": 0.4}}"#,
            r#"{"validators": {"committee_size": 9}}"#,
            r#"{"integration": {"w_min": 0.5}}"#,
            r#"{"global_privacy": {"epsilon": 0.0}}"#,
            r#"{"threat_levels": [0.2, 1.2]}"#,
            r#"{"poison_nodes": {"node-099": 10.0}}"#,
            r#"{"contract": {"freshness_window": 1}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(ConfigError::Invalid { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn threat_schedule_falls_back() {
        let c = RunConfig::from_json(r#"{"threat_levels": [0.5, 0.7]}"#).unwrap();
        assert_eq!(c.threat_at(1), 0.5);
        assert_eq!(c.threat_at(2), 0.7);
        assert_eq!(c.threat_at(3), DEFAULT_THREAT);
    }
}
