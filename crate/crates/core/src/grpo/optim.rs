use serde::{Deserialize, Serialize};

use super::{GrpoError, Result};
use crate::policy::Weights;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(GrpoError::Configuration(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied before the moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub settings: AdamWSettings,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(settings: AdamWSettings, params: &Weights<Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            settings,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: &mut Weights<Tensor>, grads: &Weights<Vec<f64>>) -> Result<()> {
        let named = grads.named();
        if named.len() != self.m.len() {
            return Err(GrpoError::Contract(format!(
                "optimizer tracks {} arrays, got {} gradients",
                self.m.len(),
                named.len()
            )));
        }
        for ((name, g), m) in named.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(GrpoError::Contract(format!(
                    "gradient {name} has {} entries, expected {}",
                    g.len(),
                    m.len()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(GrpoError::Numerical(format!(
                    "non-finite gradient in {name} at index {i}; update skipped"
                )));
            }
        }
        let s = self.settings;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let decay = 1.0 - s.lr * s.weight_decay;
        for (((p, (_, g)), m), v) in params
            .entries_mut()
            .into_iter()
            .zip(&named)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pi *= decay;
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut Weights<Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.entries_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}
