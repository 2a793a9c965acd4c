//! Reward scorers, scaling and quantization, and weighted aggregation.
//!
//! Three components feed the final reward:
//!
//! | component | raw scorer | multiplier | quantized |
//! |---|---|---|---|
//! | conditional `r_C` | [`Domain::condition_score`](crate::domain::Domain::condition_score) | 5 | yes, summed with the scaled value |
//! | quality `r_I` | [`QualityScorer`] | 2 | no |
//! | realism `r_R` | [`RealismScorer`] or the remote judge | 1.25 local, 0.25 judge | no |
//!
//! `r_final = lambda_c * r_C + lambda_i * r_I + lambda_r * r_R`.

mod judge;
mod scorers;
mod suite;

pub use judge::{
    parse_binary_subscore, parse_judge_verdict, JudgeClient, JudgeError, JudgeSettings,
    JudgeVerdict, JUDGE_PROMPT_TEMPLATE,
};
pub use scorers::{total_variation, QualityScorer, RealismScorer};
pub use suite::{FallbackPolicy, RealismSource, RewardSettings, RewardSuite};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DomainError;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("judge failure: {0}")]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, RewardError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_r: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_i: 1.0,
            lambda_r: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_i, self.lambda_r];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RewardError::Configuration(format!(
                "reward weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(RewardError::Configuration(
                "at least one reward weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    ConditionAlignment,
    Preference,
    Quality,
    Judge,
    LocalRealism,
}

impl ScorerKind {
    pub fn multiplier(self) -> f64 {
        match self {
            ScorerKind::ConditionAlignment | ScorerKind::Preference => 5.0,
            ScorerKind::Quality => 2.0,
            ScorerKind::Judge => 0.25,
            ScorerKind::LocalRealism => 1.25,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, ScorerKind::ConditionAlignment | ScorerKind::Preference)
    }
}

pub const QUANT_LEVELS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Thresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1.is_finite() && t2.is_finite() && t1 < t2) {
            return Err(RewardError::Configuration(format!(
                "quantization thresholds need finite t1 < t2, got ({t1}, {t2})"
            )));
        }
        Ok(Self { t1, t2 })
    }

    /// 33rd and 67th percentiles (linear interpolation) of `scaled`; when they
    /// coincide `t2` is nudged just above `t1`.
    pub fn from_percentiles(scaled: &[f64]) -> Result<Self> {
        if scaled.is_empty() || scaled.iter().any(|v| !v.is_finite()) {
            return Err(RewardError::Contract(
                "threshold calibration needs a non-empty finite sample".into(),
            ));
        }
        let mut sorted = scaled.to_vec();
        sorted.sort_by(f64::total_cmp);
        let t1 = percentile(&sorted, 33.0);
        let mut t2 = percentile(&sorted, 67.0);
        if t2 <= t1 {
            t2 = t1 + 1e-9;
        }
        Self::new(t1, t2)
    }

    pub fn quantize(&self, scaled: f64) -> f64 {
        if scaled < self.t1 {
            QUANT_LEVELS[0]
        } else if scaled < self.t2 {
            QUANT_LEVELS[1]
        } else {
            QUANT_LEVELS[2]
        }
    }
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Returns `(scaled, quantized)`; `quantized` is `None` for unquantized kinds.
pub fn scale_and_quantize(
    raw: f64,
    kind: ScorerKind,
    thresholds: Option<&Thresholds>,
) -> Result<(f64, Option<f64>)> {
    let scaled = raw * kind.multiplier();
    if !kind.is_quantized() {
        return Ok((scaled, None));
    }
    let th = thresholds.ok_or_else(|| {
        RewardError::Configuration(format!("{kind:?} is quantized but no thresholds are set"))
    })?;
    Ok((scaled, Some(th.quantize(scaled))))
}

pub fn aggregate_final(r_c: f64, r_i: f64, r_r: f64, weights: &RewardWeights) -> f64 {
    weights.lambda_c * r_c + weights.lambda_i * r_i + weights.lambda_r * r_r
}

/// Per-sample reward record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub raw_c: f64,
    pub raw_i: f64,
    pub raw_r: f64,
    pub r_c: f64,
    pub r_i: f64,
    pub r_r: f64,
    pub r_final: f64,
    /// Set when the realism component came from the failure fallback.
    pub fallback: bool,
}

/// Scores groups of generated token sequences.
pub trait RewardModel {
    fn score_group(
        &mut self,
        condition: &crate::policy::Condition,
        samples: &[crate::tokenizer::TokenSequence],
    ) -> Result<Vec<RewardBreakdown>>;

    /// Judge incidents (failures, parse errors) so far.
    fn incidents(&self) -> u64 {
        0
    }
}
