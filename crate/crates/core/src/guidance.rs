//! Classifier-free guidance: condition dropout for training and logit mixing
//! for sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{forward_logits, Condition, PolicyError, PolicyParameters};
use crate::tensor::softmax_row;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

/// Which distribution the policy ratio is computed under during RL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// Same guided mix that sampling used.
    Guided,
    /// Raw conditional policy.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSettings {
    pub enabled: bool,
    pub scale_train: f64,
    pub scale_infer: f64,
    pub dropout_rate: f64,
    pub ratio_mode: RatioMode,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_train: 2.0,
            scale_infer: 2.0,
            dropout_rate: 0.1,
            ratio_mode: RatioMode::Guided,
        }
    }
}

impl GuidanceSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(GuidanceError::Configuration(format!(
                "cfg.dropout_rate must be in [0, 1], got {}",
                self.dropout_rate
            )));
        }
        for (name, s) in [("scale_train", self.scale_train), ("scale_infer", self.scale_infer)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(GuidanceError::Configuration(format!(
                    "cfg.{name} must be finite and non-negative, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Guidance scale for RL sampling, `None` when guidance is off.
    pub fn train_scale(&self) -> Option<f64> {
        self.enabled.then_some(self.scale_train)
    }

    pub fn infer_scale(&self) -> Option<f64> {
        self.enabled.then_some(self.scale_infer)
    }
}

/// Replaces the condition with the null condition with probability `rate`.
pub fn drop_condition<R: Rng>(condition: Condition, rate: f64, rng: &mut R) -> Result<Condition> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(GuidanceError::Configuration(format!(
            "dropout rate must be in [0, 1], got {rate}"
        )));
    }
    let u: f64 = rng.random();
    Ok(if u < rate { Condition::Null } else { condition })
}

/// `l_u + s * (l_c - l_u)`, element-wise.
pub fn mix_logits(l_c: &[f64], l_u: &[f64], s: f64) -> Result<Vec<f64>> {
    if l_c.len() != l_u.len() {
        return Err(GuidanceError::Dimension(format!(
            "conditional row has {} entries, unconditional row {}",
            l_c.len(),
            l_u.len()
        )));
    }
    Ok(l_c.iter().zip(l_u).map(|(&c, &u)| u + s * (c - u)).collect())
}

/// Softmax of the guided mix for the next token after `prefix`.
pub fn guided_next_distribution(
    params: &PolicyParameters,
    condition: &Condition,
    prefix: &TokenSequence,
    s: f64,
) -> Result<Vec<f64>> {
    if condition.is_null() {
        return Err(GuidanceError::Contract(
            "guided distribution needs a non-null condition".into(),
        ));
    }
    let cond = forward_logits(params, condition, prefix)?;
    let uncond = forward_logits(params, &Condition::Null, prefix)?;
    let last = prefix.len();
    let mixed = mix_logits(cond.row(last), uncond.row(last), s)?;
    Ok(softmax_row(&mixed))
}
