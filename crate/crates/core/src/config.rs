//! Experiment configuration: a JSON document layered over a named preset,
//! then `--set key.path=value` overrides, then an explicit seed.
//!
//! Every section rejects unknown keys, so a typo fails loudly instead of
//! silently running with a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{Domain, DomainSettings};
use crate::grpo::GrpoSettings;
use crate::guidance::GuidanceSettings;
use crate::policy::{ConditioningMode, PolicyConfig, SamplerSettings};
use crate::rewards::RewardSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub const PRESETS: [&str; 7] = [
    "toy-default",
    "paper-fidelity",
    "ablation-no-kl",
    "ablation-reward-a",
    "ablation-reward-b",
    "ablation-reward-c",
    "ablation-reward-d",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    /// `nano` or `mini`.
    pub preset: String,
    pub conditioning_mode: ConditioningMode,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            preset: "nano".into(),
            conditioning_mode: ConditioningMode::Class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub corpus_size: usize,
    pub checkpoint_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.0,
            corpus_size: 512,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSettings {
    pub steps: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Stop after this many evaluations without a better mean sample
    /// reward. Off when absent.
    pub early_stop_patience: Option<usize>,
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            checkpoint_every: 50,
            eval_every: 25,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub samples_per_class: usize,
    /// Held-out real images, drawn from a seed disjoint from the training corpus.
    pub real_set_size: usize,
    pub knn_k: usize,
    pub entropy_budget: usize,
    pub sweep_scales: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples_per_class: 64,
            real_set_size: 128,
            knn_k: 3,
            entropy_budget: 32,
            sweep_scales: vec![1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Preset the document was layered on; informational once resolved.
    pub preset: String,
    pub seed: u64,
    pub output_dir: String,
    /// Adds `wall_clock_ms` to metric records; off keeps logs byte-reproducible.
    pub record_wall_clock: bool,
    pub domain: DomainSettings,
    pub model: ModelSettings,
    pub sampler: SamplerSettings,
    pub guidance: GuidanceSettings,
    pub grpo: GrpoSettings,
    pub rewards: RewardSettings,
    pub pretrain: PretrainSettings,
    pub rl: RlSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "toy-default".into(),
            seed: 0,
            output_dir: "runs/default".into(),
            record_wall_clock: false,
            domain: DomainSettings::default(),
            model: ModelSettings::default(),
            sampler: SamplerSettings::default(),
            guidance: GuidanceSettings::default(),
            grpo: GrpoSettings::default(),
            rewards: RewardSettings::default(),
            pretrain: PretrainSettings::default(),
            rl: RlSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self {
            preset: name.to_string(),
            ..Self::default()
        };
        match name {
            "toy-default" => {}
            "paper-fidelity" => {
                c.grpo.clip_epsilon = 0.2;
                c.grpo.kl_beta = 0.1;
                c.grpo.group_size = 8;
                c.grpo.batch_conditions = 8;
                c.grpo.lr = 1e-5;
                c.grpo.adam_beta1 = 0.9;
                c.grpo.adam_beta2 = 0.95;
                c.grpo.weight_decay = 0.05;
                c.guidance.scale_train = 2.0;
                c.sampler = SamplerSettings::default();
                c.rl.checkpoint_every = 100;
            }
            "ablation-no-kl" => c.grpo.kl_beta = 0.0,
            "ablation-reward-a" => c.rewards.lambda_c = 0.0,
            "ablation-reward-b" => c.rewards.lambda_i = 0.0,
            "ablation-reward-c" => c.rewards.lambda_r = 0.0,
            "ablation-reward-d" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Total rollouts per step, `batch_conditions * group_size`.
    pub fn rollouts_per_step(&self) -> usize {
        self.grpo.batch_conditions * self.grpo.group_size
    }

    pub fn build_domain(&self) -> Result<Domain> {
        Domain::new(self.domain.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn policy_config(&self, domain: &Domain) -> Result<PolicyConfig> {
        let (num_layers, hidden_size, num_heads) =
            PolicyConfig::preset(&self.model.preset).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let config = PolicyConfig {
            num_layers,
            hidden_size,
            num_heads,
            vocab_size: domain.codebook().len(),
            max_seq_len: domain.seq_len(),
            conditioning_mode: self.model.conditioning_mode,
            num_classes: domain.num_classes(),
            text_vocab_size: domain.text_vocab_size(),
            max_text_len: domain.class_text(0).len(),
        };
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let domain = self.build_domain()?;
        self.policy_config(&domain)?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        self.guidance.validate().map_err(|e| invalid(&e))?;
        self.grpo.validate().map_err(|e| invalid(&e))?;
        self.rewards.validate().map_err(|e| invalid(&e))?;
        if !self.sampler.is_unfiltered() {
            return Err(ConfigError::Invalid(
                "sampler must be unfiltered (top_k 0, top_p 1, temperature > 0) for RL".into(),
            ));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.corpus_size == 0 || !(p.lr > 0.0 && p.lr.is_finite()) || p.weight_decay < 0.0 {
            return Err(ConfigError::Invalid(format!("invalid pretrain settings {p:?}")));
        }
        if self.rl.early_stop_patience == Some(0) {
            return Err(ConfigError::Invalid("rl.early_stop_patience must be positive".into()));
        }
        let e = &self.eval;
        if e.samples_per_class == 0 || e.real_set_size < 2 || e.knn_k == 0 || e.entropy_budget == 0 {
            return Err(ConfigError::Invalid(format!("invalid eval settings {e:?}")));
        }
        if e.sweep_scales.is_empty() || e.sweep_scales.iter().any(|s| !s.is_finite()) {
            return Err(ConfigError::Invalid("eval.sweep_scales must be finite and non-empty".into()));
        }
        Ok(())
    }

    /// Layers `document` over its preset, applies overrides and seed, then
    /// validates. `preset` wins over a `preset` key in the document.
    pub fn resolve(
        document: Option<Value>,
        preset: Option<&str>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let document = document.unwrap_or_else(|| Value::Object(Default::default()));
        if !document.is_object() {
            return Err(ConfigError::Invalid("config document must be a JSON object".into()));
        }
        let name = match (preset, document.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(ConfigError::Invalid(format!("preset must be a string, got {other}"))),
            (None, None) => "toy-default".to_string(),
        };
        let base = Self::preset(&name)?;
        let mut value = serde_json::to_value(&base).expect("config serializes");
        merge(&mut value, document, "")?;
        value["preset"] = Value::String(name);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        let config: Self = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, preset: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let document = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Some(serde_json::from_str(&text).map_err(|e| {
                    ConfigError::Invalid(format!("{}: {e}", p.display()))
                })?)
            }
            None => None,
        };
        Self::resolve(document, preset, overrides, seed)
    }
}

/// Recursive object merge; keys absent from `base` are rejected with their path.
fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &sub)?,
                    Some(slot) => *slot = v,
                    None => return Err(ConfigError::Invalid(format!("unknown config key '{sub}'"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override '{spec}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown config key '{key}'")))?;
    }
    *slot = value;
    Ok(())
}
