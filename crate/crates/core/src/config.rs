//! Flat run-config document and its conversion into a [`FederationConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::client::{LocalTrainConfig, LowConfMode, XiRule};
use crate::datagen::{AugmentConfig, DatasetSpec};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::losses::{DistanceMetric, LossWeights};
use crate::server::GptConfig;

/// Every key except `master_seed` has a default. `data_seed` falls back to
/// `master_seed` when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: Option<u64>,
    pub data_seed: Option<u64>,

    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub dirichlet_alpha: f64,

    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub confidence_threshold: f64,
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub low_conf_mode: LowConfMode,
    pub xi_rule: XiRule,
    /// `null` disables clipping.
    pub grad_clip_norm: Option<f64>,

    pub gpt_enabled: bool,
    pub gpt_lr: f64,
    pub gpt_steps: usize,
    pub gpt_metric: DistanceMetric,

    pub weak_noise_std: f64,
    pub strong_noise_std: f64,
    pub strong_mask_prob: f64,

    pub input_dim: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub class_sphere_radius: f64,
    pub class_noise_std: f64,
    pub labeled_fraction: f64,
    pub test_fraction: f64,

    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,

    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let local = LocalTrainConfig::default();
        let gpt = GptConfig::default();
        Self {
            master_seed: None,
            data_seed: None,
            num_clients: 20,
            clients_per_round: 8,
            rounds: 40,
            dirichlet_alpha: 0.5,
            local_epochs: local.epochs,
            local_lr: local.lr,
            batch_size: local.batch_size,
            confidence_threshold: local.tau,
            loss_alpha: local.weights.alpha,
            loss_beta: local.weights.beta,
            low_conf_mode: local.low_conf_mode,
            xi_rule: local.xi_rule,
            grad_clip_norm: local.grad_clip_norm,
            gpt_enabled: true,
            gpt_lr: gpt.lr,
            gpt_steps: gpt.steps,
            gpt_metric: gpt.metric,
            weak_noise_std: local.augment.weak_noise_std,
            strong_noise_std: local.augment.strong_noise_std,
            strong_mask_prob: local.augment.strong_mask_prob,
            input_dim: 16,
            num_classes: 5,
            samples_per_class: 200,
            class_sphere_radius: 3.0,
            class_noise_std: 1.0,
            labeled_fraction: 0.1,
            test_fraction: 0.2,
            hidden_dims: vec![32],
            feature_dim: 16,
            out_dir: "out".into(),
        }
    }
}

/// Names of all accepted keys, in declaration order.
pub fn schema_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Parses an override value: valid JSON is taken literally, anything else
/// as a bare string (so `low_conf_mode=icpl` works without quotes).
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))
}

pub fn check_key(key: &str) -> Result<()> {
    if schema_keys().iter().any(|k| k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key `{key}`")))
    }
}

/// A raw document plus applied overrides, not yet typed.
#[derive(Debug, Clone)]
pub struct RawConfig(Map<String, Value>);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        match serde_json::from_str(text)? {
            Value::Object(map) => Ok(Self(map)),
            _ => Err(Error::Config("config document must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        check_key(key)?;
        self.0.insert(key.to_string(), value);
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(Value::Object(self.0.clone()))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.federation()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn federation(&self) -> Result<FederationConfig> {
        let master_seed = self
            .master_seed
            .ok_or_else(|| Error::Config("missing required key `master_seed`".into()))?;
        let cfg = FederationConfig {
            num_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds,
            dirichlet_alpha: self.dirichlet_alpha,
            local: LocalTrainConfig {
                epochs: self.local_epochs,
                batch_size: self.batch_size,
                lr: self.local_lr,
                tau: self.confidence_threshold,
                weights: LossWeights {
                    alpha: self.loss_alpha,
                    beta: self.loss_beta,
                },
                low_conf_mode: self.low_conf_mode,
                xi_rule: self.xi_rule,
                augment: AugmentConfig {
                    weak_noise_std: self.weak_noise_std,
                    strong_noise_std: self.strong_noise_std,
                    strong_mask_prob: self.strong_mask_prob,
                },
                grad_clip_norm: self.grad_clip_norm,
            },
            gpt: GptConfig {
                lr: self.gpt_lr,
                steps: self.gpt_steps,
                metric: self.gpt_metric,
            },
            gpt_enabled: self.gpt_enabled,
            dataset: DatasetSpec {
                input_dim: self.input_dim,
                num_classes: self.num_classes,
                samples_per_class: self.samples_per_class,
                class_sphere_radius: self.class_sphere_radius,
                class_noise_std: self.class_noise_std,
                labeled_fraction: self.labeled_fraction,
                test_fraction: self.test_fraction,
                seed: self.data_seed.unwrap_or(master_seed),
            },
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            master_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_master_seed_names_key() {
        let raw = RawConfig::parse("{}").unwrap();
        let err = raw.resolve().unwrap_err().to_string();
        assert!(err.contains("master_seed"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let raw = RawConfig::parse(r#"{"master_seed": 1, "nope": 2}"#).unwrap();
        assert!(raw.resolve().is_err());
        let mut raw = RawConfig::parse(r#"{"master_seed": 1}"#).unwrap();
        assert!(raw.set("nope", Value::from(1)).is_err());
    }

    #[test]
    fn overrides_and_bare_strings() {
        let mut raw = RawConfig::parse(r#"{"master_seed": 3}"#).unwrap();
        raw.set("dirichlet_alpha", parse_value("0.1")).unwrap();
        raw.set("low_conf_mode", parse_value("discard")).unwrap();
        raw.set("xi_rule", parse_value("top5")).unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.dirichlet_alpha, 0.1);
        assert_eq!(cfg.low_conf_mode, LowConfMode::Discard);
        assert_eq!(cfg.xi_rule, XiRule::Top5);
        assert_eq!(cfg.federation().unwrap().dataset.seed, 3);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RawConfig::parse(r#"{"master_seed": 9, "data_seed": 4, "gpt_metric": "cosine"}"#)
            .unwrap()
            .resolve()
            .unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RawConfig::parse(&text).unwrap().resolve().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(split_assignment("a=b=c").unwrap(), ("a", "b=c"));
        assert!(split_assignment("novalue").is_err());
        assert!(split_assignment("=1").is_err());
    }
}
