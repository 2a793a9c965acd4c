use serde::{Deserialize, Serialize};

use super::{
    aggregate_final, scale_and_quantize, JudgeClient, JudgeSettings, QualityScorer, RealismScorer,
    Result, RewardBreakdown, RewardError, RewardModel, RewardWeights, ScorerKind, Thresholds,
};
use crate::domain::Domain;
use crate::policy::Condition;
use crate::tokenizer::{ImageGrid, TokenSequence};

/// Raw judge score used when a judge call fails under the neutral policy.
pub const NEUTRAL_JUDGE_SCORE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealismSource {
    Local,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackPolicy {
    Neutral,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSettings {
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_r: f64,
    pub realism: RealismSource,
    pub judge_url: Option<String>,
    pub judge_timeout_ms: u64,
    pub judge_retries: u32,
    pub judge_backoff_ms: u64,
    pub judge_max_in_flight: usize,
    pub fallback: FallbackPolicy,
    /// Fixed `[t1, t2]`; measured on a calibration batch when absent.
    pub quantize_thresholds: Option<[f64; 2]>,
    pub calibration_samples: usize,
    /// Real images used to calibrate quality and realism scorers.
    pub reference_size: usize,
}

impl Default for RewardSettings {
    fn default() -> Self {
        let judge = JudgeSettings::default();
        Self {
            lambda_c: 1.0,
            lambda_i: 1.0,
            lambda_r: 1.0,
            realism: RealismSource::Local,
            judge_url: None,
            judge_timeout_ms: judge.timeout_ms,
            judge_retries: judge.retries,
            judge_backoff_ms: judge.backoff_ms,
            judge_max_in_flight: judge.max_in_flight,
            fallback: FallbackPolicy::Neutral,
            quantize_thresholds: None,
            calibration_samples: 256,
            reference_size: 256,
        }
    }
}

impl RewardSettings {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_c: self.lambda_c,
            lambda_i: self.lambda_i,
            lambda_r: self.lambda_r,
        }
    }

    pub fn judge_settings(&self) -> JudgeSettings {
        JudgeSettings {
            url: self.judge_url.clone(),
            timeout_ms: self.judge_timeout_ms,
            retries: self.judge_retries,
            backoff_ms: self.judge_backoff_ms,
            max_in_flight: self.judge_max_in_flight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if let Some([t1, t2]) = self.quantize_thresholds {
            Thresholds::new(t1, t2)?;
        }
        if self.realism == RealismSource::Judge && self.judge_url.is_none() {
            return Err(RewardError::Configuration(
                "rewards.realism is judge but rewards.judge_url is not set".into(),
            ));
        }
        if self.calibration_samples == 0 || self.reference_size == 0 {
            return Err(RewardError::Configuration(
                "calibration_samples and reference_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The full reward pipeline over decoded token sequences.
#[derive(Debug, Clone)]
pub struct RewardSuite {
    domain: Domain,
    settings: RewardSettings,
    quality: QualityScorer,
    realism: RealismScorer,
    judge: Option<JudgeClient>,
    thresholds: Option<Thresholds>,
    incidents: u64,
}

impl RewardSuite {
    pub fn new(domain: Domain, settings: RewardSettings, reference: &[ImageGrid]) -> Result<Self> {
        settings.validate()?;
        let quality = QualityScorer::calibrate(reference)?;
        let realism = RealismScorer::fit(reference, domain.codebook().levels())?;
        let judge = match settings.realism {
            RealismSource::Judge => Some(JudgeClient::new(settings.judge_settings())?),
            RealismSource::Local => None,
        };
        let thresholds = match settings.quantize_thresholds {
            Some([t1, t2]) => Some(Thresholds::new(t1, t2)?),
            None => None,
        };
        Ok(Self {
            domain,
            settings,
            quality,
            realism,
            judge,
            thresholds,
            incidents: 0,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn quality(&self) -> &QualityScorer {
        &self.quality
    }

    pub fn realism(&self) -> &RealismScorer {
        &self.realism
    }

    pub fn thresholds(&self) -> Option<Thresholds> {
        self.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: Thresholds) {
        self.thresholds = Some(thresholds);
    }

    /// Raw condition alignment; the null condition scores its best class.
    pub fn condition_raw(&self, image: &ImageGrid, condition: &Condition) -> Result<f64> {
        Ok(match condition {
            Condition::Null => {
                let mut best: f64 = 0.0;
                for c in 0..self.domain.num_classes() {
                    best = best.max(self.domain.class_score(image, c)?);
                }
                best
            }
            other => self.domain.condition_score(image, other)?,
        })
    }

    /// Scaled condition scores, the input to threshold calibration.
    pub fn scaled_condition_scores(&self, samples: &[(Condition, TokenSequence)]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|(c, t)| {
                let img = self.domain.decode(t)?;
                Ok(self.condition_raw(&img, c)? * ScorerKind::ConditionAlignment.multiplier())
            })
            .collect()
    }

    fn realism_raw(&mut self, images: &[ImageGrid], condition: &Condition) -> Result<Vec<(f64, bool)>> {
        let Some(judge) = &self.judge else {
            return images.iter().map(|i| Ok((self.realism.score(i)?, false))).collect();
        };
        let text = self.domain.describe(condition);
        let items: Vec<_> = images.iter().map(|i| (i.clone(), text.clone())).collect();
        let mut out = Vec::with_capacity(items.len());
        for result in judge.query_many(&items) {
            match result {
                Ok(v) => out.push((v.score, false)),
                Err(e) => {
                    self.incidents += 1;
                    log::warn!("judge incident #{}: {e}", self.incidents);
                    match self.settings.fallback {
                        FallbackPolicy::Neutral => out.push((NEUTRAL_JUDGE_SCORE, true)),
                        FallbackPolicy::Abort => return Err(e.into()),
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn score_images(&mut self, condition: &Condition, images: &[ImageGrid]) -> Result<Vec<RewardBreakdown>> {
        let realism_kind = match self.judge {
            Some(_) => ScorerKind::Judge,
            None => ScorerKind::LocalRealism,
        };
        let realism = self.realism_raw(images, condition)?;
        let weights = self.settings.weights();
        images
            .iter()
            .zip(realism)
            .map(|(img, (raw_r, fallback))| {
                let raw_c = self.condition_raw(img, condition)?;
                let (scaled_c, quant_c) =
                    scale_and_quantize(raw_c, ScorerKind::ConditionAlignment, self.thresholds.as_ref())?;
                let r_c = scaled_c + quant_c.unwrap_or(0.0);
                let raw_i = self.quality.score(img);
                let (r_i, _) = scale_and_quantize(raw_i, ScorerKind::Quality, None)?;
                let (r_r, _) = scale_and_quantize(raw_r, realism_kind, None)?;
                Ok(RewardBreakdown {
                    raw_c,
                    raw_i,
                    raw_r,
                    r_c,
                    r_i,
                    r_r,
                    r_final: aggregate_final(r_c, r_i, r_r, &weights),
                    fallback,
                })
            })
            .collect()
    }
}

impl RewardModel for RewardSuite {
    fn score_group(&mut self, condition: &Condition, samples: &[TokenSequence]) -> Result<Vec<RewardBreakdown>> {
        let images = samples
            .iter()
            .map(|t| self.domain.decode(t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.score_images(condition, &images)
    }

    fn incidents(&self) -> u64 {
        self.incidents
    }
}
