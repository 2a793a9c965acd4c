//! Group-relative policy optimization.
//!
//! Per-token objective for rollout `i` at position `t`:
//!
//! ```text
//! min(r * A_i, clip(r, 1 - eps, 1 + eps) * A_i) - beta * k
//! r = exp(logp_cur - logp_old)
//! k = rho - ln(rho) - 1,   rho = exp(logp_ref - logp_cur)
//! ```
//!
//! averaged over tokens, then over the group, then over the condition batch.

mod optim;
mod trainer;

pub use optim::{clip_grad_norm, AdamW, AdamWSettings};
pub use trainer::{rollout_seed, GrpoTrainer, RolloutGroup, StepReport};
pub(crate) use trainer::splitmix64;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::GuidanceError;
use crate::policy::PolicyError;
use crate::rewards::RewardError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSettings {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub inner_epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub batch_conditions: usize,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.1,
            inner_epochs: 1,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            batch_conditions: 8,
        }
    }
}

impl GrpoSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GrpoError::Configuration(msg));
        if self.group_size < 2 {
            return bad(format!("grpo.group_size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("grpo.clip_epsilon must be in (0, 1), got {}", self.clip_epsilon));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("grpo.kl_beta must be non-negative, got {}", self.kl_beta));
        }
        if self.inner_epochs == 0 || self.batch_conditions == 0 {
            return bad("grpo.inner_epochs and grpo.batch_conditions must be positive".into());
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!("grpo.grad_clip_norm must be non-negative, got {}", self.grad_clip_norm));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// `(R_i - mean) / std` with the population standard deviation; all zeros
/// when `std < 1e-8`.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(GrpoError::Contract(format!(
            "advantages need a group of at least 2, got {}",
            rewards.len()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::Contract(format!(
            "non-finite reward {} for group member {i}",
            rewards[i]
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ADVANTAGE_STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(GrpoError::Contract(format!(
            "{what}: {} vs {} log-probabilities",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn importance_ratios(logprob_current: &[f64], logprob_old: &[f64]) -> Result<Vec<f64>> {
    same_len(logprob_current, logprob_old, "importance_ratios")?;
    Ok(logprob_current
        .iter()
        .zip(logprob_old)
        .map(|(c, o)| (c - o).exp())
        .collect())
}

pub fn kl_estimate(logprob_ref: &[f64], logprob_current: &[f64]) -> Result<Vec<f64>> {
    same_len(logprob_ref, logprob_current, "kl_estimate")?;
    Ok(logprob_ref
        .iter()
        .zip(logprob_current)
        .map(|(r, c)| {
            let d = r - c;
            d.exp() - d - 1.0
        })
        .collect())
}

/// Log-probabilities and advantage for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTerms<'a> {
    pub current: &'a [f64],
    pub old: &'a [f64],
    pub reference: &'a [f64],
    pub advantage: f64,
}

/// Token-averaged clipped surrogate minus KL penalty for one rollout.
pub fn rollout_objective(terms: &RolloutTerms, epsilon: f64, beta: f64) -> Result<f64> {
    if terms.current.is_empty() {
        return Err(GrpoError::Contract("rollout without log-probabilities".into()));
    }
    let ratios = importance_ratios(terms.current, terms.old)?;
    let kl = kl_estimate(terms.reference, terms.current)?;
    let a = terms.advantage;
    let total: f64 = ratios
        .iter()
        .zip(&kl)
        .map(|(&r, &k)| (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a) - beta * k)
        .sum();
    Ok(total / ratios.len() as f64)
}

/// Mean over groups of the mean over members of [`rollout_objective`].
pub fn grpo_objective(groups: &[Vec<RolloutTerms>], epsilon: f64, beta: f64) -> Result<f64> {
    if groups.is_empty() {
        return Err(GrpoError::Contract("objective over an empty batch".into()));
    }
    let mut total = 0.0;
    for group in groups {
        if group.is_empty() {
            return Err(GrpoError::Contract("empty rollout group".into()));
        }
        let mut g = 0.0;
        for terms in group {
            g += rollout_objective(terms, epsilon, beta)?;
        }
        total += g / group.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Tape version of [`rollout_objective`], multiplied by `weight`.
/// `current` is the `[T]` log-probability node of the rollout.
pub fn tape_rollout_objective(
    tape: &mut Tape,
    current: Var,
    old: &[f64],
    reference: &[f64],
    advantage: f64,
    epsilon: f64,
    beta: f64,
    weight: f64,
) -> Result<Var> {
    let n = tape.value(current).numel();
    if old.len() != n || reference.len() != n {
        return Err(GrpoError::Contract(format!(
            "rollout has {n} current, {} old and {} reference log-probabilities",
            old.len(),
            reference.len()
        )));
    }
    let old_v = tape.constant(Tensor::vector(old.to_vec()));
    let ref_v = tape.constant(Tensor::vector(reference.to_vec()));
    let log_ratio = tape.sub(current, old_v)?;
    let ratio = tape.exp(log_ratio);
    let unclipped = tape.scale(ratio, advantage);
    let clipped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = tape.scale(clipped, advantage);
    let surrogate = tape.minimum(unclipped, clipped)?;
    let per_token = if beta != 0.0 {
        let d = tape.sub(ref_v, current)?;
        let rho = tape.exp(d);
        let k = tape.sub(rho, d)?;
        let k = tape.add_scalar(k, -1.0);
        let penalty = tape.scale(k, beta);
        tape.sub(surrogate, penalty)?
    } else {
        surrogate
    };
    let mean = tape.mean(per_token);
    Ok(tape.scale(mean, weight))
}
