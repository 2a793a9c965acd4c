use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, Decoder, PolicyError, PolicyParameters, Result};
use crate::guidance::mix_logits;
use crate::tokenizer::TokenSequence;

/// Temperature 0 means greedy decoding with log-probability 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub temperature: f64,
    /// 0 keeps every token.
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Configuration(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::Configuration(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }

    /// True when sampling uses the full softmax distribution.
    pub fn is_unfiltered(&self) -> bool {
        self.top_k == 0 && self.top_p >= 1.0 && self.temperature > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub condition: Condition,
    pub tokens: TokenSequence,
    pub logprob_sampling: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    pub logprob_current: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token; the log-probability is under the filtered, renormalized
/// distribution that was sampled from.
pub fn sample_next<R: Rng>(logits: &[f64], settings: &SamplerSettings, rng: &mut R) -> Result<(usize, f64)> {
    settings.validate()?;
    if logits.is_empty() {
        return Err(PolicyError::Sampling("empty logits row".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(PolicyError::Sampling(format!("non-finite logit at index {i}")));
    }
    if settings.temperature == 0.0 || settings.top_k == 1 {
        return Ok((argmax(logits), 0.0));
    }
    let inv_t = 1.0 / settings.temperature;
    let scaled: Vec<f64> = logits.iter().map(|v| v * inv_t).collect();

    // Descending by score, lower index first on ties.
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    if settings.top_k > 0 && settings.top_k < order.len() {
        order.truncate(settings.top_k);
    }
    if settings.top_p < 1.0 {
        let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
        let probs = crate::tensor::softmax_row(&kept);
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (n, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= settings.top_p - 1e-12 {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    if order.is_empty() {
        return Err(PolicyError::Sampling("no token survived filtering".into()));
    }
    let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let log_probs = crate::tensor::log_softmax_row(&kept);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut pick = order.len() - 1;
    for (n, lp) in log_probs.iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            pick = n;
            break;
        }
    }
    Ok((order[pick], log_probs[pick]))
}

/// Samples a full-length sequence. With `guidance = Some(s)` each step draws
/// from the guided mix of conditional and null-condition logits.
pub fn sample_sequence<R: Rng>(
    params: &PolicyParameters,
    condition: &Condition,
    settings: &SamplerSettings,
    guidance: Option<f64>,
    rng: &mut R,
) -> Result<Rollout> {
    settings.validate()?;
    let len = params.config.max_seq_len;
    let (mut cond, mut lc) = Decoder::start(params, condition)?;
    let mut uncond = match guidance {
        Some(_) => Some(Decoder::start(params, &Condition::Null)?),
        None => None,
    };
    let mut tokens = Vec::with_capacity(len);
    let mut logprobs = Vec::with_capacity(len);
    for t in 0..len {
        let (tok, lp) = match (&uncond, guidance) {
            (Some((_, lu)), Some(s)) => {
                let mixed = mix_logits(&lc, lu, s).map_err(|e| PolicyError::Contract(e.to_string()))?;
                sample_next(&mixed, settings, rng)?
            }
            _ => sample_next(&lc, settings, rng)?,
        };
        tokens.push(tok);
        logprobs.push(lp);
        if t + 1 < len {
            lc = cond.step(tok)?;
            if let Some((dec, lu)) = uncond.as_mut() {
                *lu = dec.step(tok)?;
            }
        }
    }
    Ok(Rollout {
        condition: condition.clone(),
        tokens: TokenSequence::new(tokens),
        logprob_sampling: logprobs,
        logprob_ref: Vec::new(),
        logprob_current: Vec::new(),
    })
}
