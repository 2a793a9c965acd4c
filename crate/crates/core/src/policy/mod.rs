//! Tiny causal transformer policy over codebook tokens.
//!
//! Position 0 of every sequence is a prefill vector derived from the
//! condition (class row, projected text embedding bag, or the learned null
//! vector); position `t + 1` consumes image token `t`. Row `t` of the logits
//! predicts image token `t`.
//!
//! Two forward implementations share one parameter set: a tape forward used
//! for gradients ([`tape_logits`]) and a plain incremental decoder used for
//! sampling and for log-probabilities that need no gradient ([`Decoder`]).

mod forward;
mod sample;

pub use forward::{
    forward_logits, mle_loss, mle_loss_tape, sequence_logprob, tape_logits, tape_sequence_logprob,
    Decoder, ParamVars,
};
pub use sample::{sample_next, sample_sequence, Rollout, SamplerSettings};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Class,
    Text,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Text(Vec<usize>),
    Null,
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub conditioning_mode: ConditioningMode,
    pub num_classes: usize,
    pub text_vocab_size: usize,
    pub max_text_len: usize,
}

impl PolicyConfig {
    /// `nano` (2 layers, hidden 32, 2 heads) or `mini` (4 layers, hidden 64, 4 heads).
    pub fn preset(name: &str) -> Result<(usize, usize, usize)> {
        match name {
            "nano" => Ok((2, 32, 2)),
            "mini" => Ok((4, 64, 4)),
            other => Err(PolicyError::Configuration(format!(
                "unknown model preset '{other}' (expected nano or mini)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Feed-forward width of each SwiGLU block.
    pub fn ffn_size(&self) -> usize {
        4 * self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
            ("text_vocab_size", self.text_vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PolicyError::Configuration(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(PolicyError::Configuration(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(PolicyError::Configuration(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn validate_condition(&self, condition: &Condition) -> Result<()> {
        match (condition, self.conditioning_mode) {
            (Condition::Null, _) => Ok(()),
            (Condition::Class(c), ConditioningMode::Class) => {
                if *c >= self.num_classes {
                    return Err(PolicyError::Contract(format!(
                        "class {c} out of range for {} classes",
                        self.num_classes
                    )));
                }
                Ok(())
            }
            (Condition::Text(tokens), ConditioningMode::Text) => {
                if tokens.is_empty() || tokens.len() > self.max_text_len {
                    return Err(PolicyError::Contract(format!(
                        "text condition length {} outside 1..={}",
                        tokens.len(),
                        self.max_text_len
                    )));
                }
                if let Some(t) = tokens.iter().find(|&&t| t >= self.text_vocab_size) {
                    return Err(PolicyError::Contract(format!(
                        "text token {t} outside alphabet of {}",
                        self.text_vocab_size
                    )));
                }
                Ok(())
            }
            (c, mode) => Err(PolicyError::Contract(format!(
                "condition {c:?} not accepted in {mode:?} conditioning mode"
            ))),
        }
    }
}

/// Per-layer weights, generic over storage (tensors, tape handles, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

/// All policy weights, generic over storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: T,
    pub output: T,
    pub class_embedding: T,
    pub text_embedding: T,
    pub text_projection: T,
    pub null_embedding: T,
}

impl<T> Weights<T> {
    /// Named entries in a fixed order shared by optimizers and checkpoints.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, v) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), v));
            }
        }
        out.extend([
            ("final_norm".to_string(), &self.final_norm),
            ("output".to_string(), &self.output),
            ("class_embedding".to_string(), &self.class_embedding),
            ("text_embedding".to_string(), &self.text_embedding),
            ("text_projection".to_string(), &self.text_projection),
            ("null_embedding".to_string(), &self.null_embedding),
        ]);
        out
    }

    /// Mutable entries in the same order as [`Weights::named`].
    pub fn entries_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.extend([
            &mut self.final_norm,
            &mut self.output,
            &mut self.class_embedding,
            &mut self.text_embedding,
            &mut self.text_projection,
            &mut self.null_embedding,
        ]);
        out
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, mut f: F) -> Weights<U> {
        Weights {
            token_embedding: f(&self.token_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: f(&l.attn_norm),
                    wq: f(&l.wq),
                    wk: f(&l.wk),
                    wv: f(&l.wv),
                    wo: f(&l.wo),
                    ffn_norm: f(&l.ffn_norm),
                    w_gate: f(&l.w_gate),
                    w_up: f(&l.w_up),
                    w_down: f(&l.w_down),
                })
                .collect(),
            final_norm: f(&self.final_norm),
            output: f(&self.output),
            class_embedding: f(&self.class_embedding),
            text_embedding: f(&self.text_embedding),
            text_projection: f(&self.text_projection),
            null_embedding: f(&self.null_embedding),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub config: PolicyConfig,
    pub weights: Weights<Tensor>,
}

impl PolicyParameters {
    fn build<F: FnMut(&[usize], bool) -> Tensor>(config: &PolicyConfig, mut make: F) -> Result<Self> {
        config.validate()?;
        let (h, v, f) = (config.hidden_size, config.vocab_size, config.ffn_size());
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: make(&[h], true),
                wq: make(&[h, h], false),
                wk: make(&[h, h], false),
                wv: make(&[h, h], false),
                wo: make(&[h, h], false),
                ffn_norm: make(&[h], true),
                w_gate: make(&[h, f], false),
                w_up: make(&[h, f], false),
                w_down: make(&[f, h], false),
            })
            .collect();
        let weights = Weights {
            token_embedding: make(&[v, h], false),
            layers,
            final_norm: make(&[h], true),
            output: make(&[h, v], false),
            class_embedding: make(&[config.num_classes, h], false),
            text_embedding: make(&[config.text_vocab_size, h], false),
            text_projection: make(&[h, h], false),
            null_embedding: make(&[1, h], false),
        };
        Ok(Self {
            config: config.clone(),
            weights,
        })
    }

    /// Normal(0, 0.02) weights and unit norm gains.
    pub fn init<R: Rng>(config: &PolicyConfig, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self::build(config, |shape, gain| {
            let n = shape.iter().product();
            let data = if gain {
                vec![1.0; n]
            } else {
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        })
    }

    /// Zero weights and unit norm gains.
    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        Self::build(config, |shape, gain| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), vec![if gain { 1.0 } else { 0.0 }; n])
                .expect("shape matches data")
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks shapes against the config, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        let want = reference.weights.named();
        let have = self.weights.named();
        if want.len() != have.len() {
            return Err(PolicyError::Contract(format!(
                "expected {} parameter arrays, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(PolicyError::Contract(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    h.shape(),
                    w.shape()
                )));
            }
        }
        if !self.is_finite() {
            return Err(PolicyError::Contract("non-finite parameter values".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
