use super::{Condition, PolicyConfig, PolicyError, PolicyParameters, Result, Weights, RMS_EPS, ROPE_BASE};
use crate::guidance::mix_logits;
use crate::tensor::ops::{log_softmax_row, rotate_pairs, softmax_row};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

/// Parameter handles registered on one tape.
pub type ParamVars = Weights<Var>;

impl ParamVars {
    /// Registers every parameter as a leaf; `trainable` controls gradients.
    pub fn register(tape: &mut Tape, params: &PolicyParameters, trainable: bool) -> Self {
        params.weights.map(|t| tape.leaf(t.clone(), trainable))
    }

    /// Accumulated gradients, zero where none reached a parameter.
    pub fn gradients(&self, tape: &Tape) -> Weights<Vec<f64>> {
        self.map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
    }
}

fn check_prefix(config: &PolicyConfig, condition: &Condition, prefix: &[usize]) -> Result<()> {
    config.validate_condition(condition)?;
    if prefix.len() >= config.max_seq_len {
        return Err(PolicyError::Contract(format!(
            "prefix of {} tokens leaves nothing to predict (max_seq_len {})",
            prefix.len(),
            config.max_seq_len
        )));
    }
    if let Some(t) = prefix.iter().find(|&&t| t >= config.vocab_size) {
        return Err(PolicyError::Contract(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn check_sequence(config: &PolicyConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() != config.max_seq_len {
        return Err(PolicyError::Contract(format!(
            "sequence has {} tokens, policy expects {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(PolicyError::Contract(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn tape_condition(tape: &mut Tape, w: &ParamVars, condition: &Condition) -> Result<Var> {
    Ok(match condition {
        Condition::Class(c) => tape.embedding(w.class_embedding, &[*c])?,
        Condition::Text(tokens) => {
            let rows = tape.embedding(w.text_embedding, tokens)?;
            let n = tokens.len();
            let avg = tape.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n])?);
            let bag = tape.matmul(avg, rows)?;
            tape.matmul(bag, w.text_projection)?
        }
        Condition::Null => w.null_embedding,
    })
}

/// Tape forward: logits `[prefix.len() + 1, vocab]`.
pub fn tape_logits(
    tape: &mut Tape,
    config: &PolicyConfig,
    w: &ParamVars,
    condition: &Condition,
    prefix: &[usize],
) -> Result<Var> {
    check_prefix(config, condition, prefix)?;
    let cond = tape_condition(tape, w, condition)?;
    let mut x = if prefix.is_empty() {
        cond
    } else {
        let toks = tape.embedding(w.token_embedding, prefix)?;
        tape.concat_rows(&[cond, toks])?
    };
    let n = prefix.len() + 1;
    let (h, heads, hd) = (config.hidden_size, config.num_heads, config.head_dim());
    let positions: Vec<usize> = (0..n).collect();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for layer in &w.layers {
        let a = tape.rms_norm(x, layer.attn_norm, RMS_EPS)?;
        let mut qkv = Vec::with_capacity(3);
        for (weight, rotate) in [(layer.wq, true), (layer.wk, true), (layer.wv, false)] {
            let p = tape.matmul(a, weight)?;
            qkv.push(if rotate {
                let p = tape.reshape(p, &[n, heads, hd])?;
                let p = tape.rope(p, &positions, ROPE_BASE)?;
                tape.reshape(p, &[n, h])?
            } else {
                p
            });
        }
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(qkv[0], head * hd, hd)?;
            let kh = tape.slice_cols(qkv[1], head * hd, hd)?;
            let vh = tape.slice_cols(qkv[2], head * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.causal_softmax(scores)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let proj = tape.matmul(att, layer.wo)?;
        x = tape.add(x, proj)?;

        let b = tape.rms_norm(x, layer.ffn_norm, RMS_EPS)?;
        let gate = tape.matmul(b, layer.w_gate)?;
        let up = tape.matmul(b, layer.w_up)?;
        let act = tape.swiglu(gate, up)?;
        let down = tape.matmul(act, layer.w_down)?;
        x = tape.add(x, down)?;
    }
    let fin = tape.rms_norm(x, w.final_norm, RMS_EPS)?;
    Ok(tape.matmul(fin, w.output)?)
}

/// Teacher-forced per-token log-probabilities `[T]` on the tape, optionally
/// under guided mixing with the null condition at `guidance` scale.
pub fn tape_sequence_logprob(
    tape: &mut Tape,
    config: &PolicyConfig,
    w: &ParamVars,
    condition: &Condition,
    tokens: &[usize],
    guidance: Option<f64>,
    temperature: f64,
) -> Result<Var> {
    check_sequence(config, tokens)?;
    check_temperature(temperature)?;
    let prefix = &tokens[..tokens.len() - 1];
    let mut logits = tape_logits(tape, config, w, condition, prefix)?;
    if let Some(s) = guidance {
        let uncond = tape_logits(tape, config, w, &Condition::Null, prefix)?;
        let diff = tape.sub(logits, uncond)?;
        let diff = tape.scale(diff, s);
        logits = tape.add(uncond, diff)?;
    }
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let lp = tape.log_softmax_rows(logits)?;
    Ok(tape.pick(lp, tokens)?)
}

/// Mean over batch and positions of the next-token negative log-likelihood.
pub fn mle_loss_tape(
    tape: &mut Tape,
    config: &PolicyConfig,
    w: &ParamVars,
    batch: &[(Condition, TokenSequence)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(PolicyError::Contract("mle_loss of an empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for (condition, seq) in batch {
        check_sequence(config, &seq.tokens)?;
        let logits = tape_logits(tape, config, w, condition, &seq.tokens[..seq.len() - 1])?;
        let ce = tape.cross_entropy(logits, &seq.tokens)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

pub fn mle_loss(params: &PolicyParameters, batch: &[(Condition, TokenSequence)]) -> Result<f64> {
    let mut tape = Tape::new();
    let w = ParamVars::register(&mut tape, params, false);
    let loss = mle_loss_tape(&mut tape, &params.config, &w, batch)?;
    Ok(tape.value(loss).data()[0])
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::Contract(format!(
            "log-probability evaluation needs a positive finite temperature, got {temperature}"
        )));
    }
    Ok(())
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.shape()[1];
    let mut out = vec![0.0; n];
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += xp * wv;
        }
    }
    out
}

fn rms(x: &[f64], gain: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain.data()).map(|(v, g)| v * inv * g).collect()
}

/// Incremental decoder with a key/value cache.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    params: &'a PolicyParameters,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    position: usize,
}

impl<'a> Decoder<'a> {
    /// Consumes the condition prefill and returns the logits for token 0.
    pub fn start(params: &'a PolicyParameters, condition: &Condition) -> Result<(Self, Vec<f64>)> {
        let config = &params.config;
        config.validate_condition(condition)?;
        let w = &params.weights;
        let x = match condition {
            Condition::Class(c) => w.class_embedding.row(*c).to_vec(),
            Condition::Text(tokens) => {
                let h = config.hidden_size;
                let scale = 1.0 / tokens.len() as f64;
                let mut bag = vec![0.0; h];
                for &t in tokens {
                    for (b, &e) in bag.iter_mut().zip(w.text_embedding.row(t)) {
                        *b += scale * e;
                    }
                }
                vec_mat(&bag, &w.text_projection)
            }
            Condition::Null => w.null_embedding.data().to_vec(),
        };
        let mut dec = Self {
            params,
            keys: vec![Vec::new(); config.num_layers],
            values: vec![Vec::new(); config.num_layers],
            position: 0,
        };
        let logits = dec.advance(x);
        Ok((dec, logits))
    }

    /// Number of positions consumed so far, including the prefill.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Consumes `token` and returns logits for the next one.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let config = &self.params.config;
        if token >= config.vocab_size {
            return Err(PolicyError::Contract(format!(
                "token {token} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.position >= config.max_seq_len {
            return Err(PolicyError::Contract(format!(
                "decoder already consumed {} positions (max_seq_len {})",
                self.position, config.max_seq_len
            )));
        }
        let x = self.params.weights.token_embedding.row(token).to_vec();
        Ok(self.advance(x))
    }

    fn advance(&mut self, mut x: Vec<f64>) -> Vec<f64> {
        let config = &self.params.config;
        let w = &self.params.weights;
        let (h, heads, hd) = (config.hidden_size, config.num_heads, config.head_dim());
        let pos = self.position;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for (li, layer) in w.layers.iter().enumerate() {
            let a = rms(&x, &layer.attn_norm);
            let mut q = vec_mat(&a, &layer.wq);
            let mut k = vec_mat(&a, &layer.wk);
            let v = vec_mat(&a, &layer.wv);
            rotate_pairs(&mut q, &[pos], heads, hd, ROPE_BASE, 1.0);
            rotate_pairs(&mut k, &[pos], heads, hd, ROPE_BASE, 1.0);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut att = vec![0.0; h];
            for head in 0..heads {
                let off = head * hd;
                let qh = &q[off..off + hd];
                let scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let kh = &keys[j * h + off..j * h + off + hd];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt
                    })
                    .collect();
                let probs = softmax_row(&scores);
                let out = &mut att[off..off + hd];
                for (j, &p) in probs.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(&values[j * h + off..j * h + off + hd]) {
                        *o += p * vv;
                    }
                }
            }
            let proj = vec_mat(&att, &layer.wo);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let b = rms(&x, &layer.ffn_norm);
            let gate = vec_mat(&b, &layer.w_gate);
            let up = vec_mat(&b, &layer.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g * crate::tensor::ops::sigmoid(g) * u)
                .collect();
            let down = vec_mat(&act, &layer.w_down);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        self.position += 1;
        vec_mat(&rms(&x, &w.final_norm), &w.output)
    }
}

/// Logits `[prefix.len() + 1, vocab]` from the incremental decoder.
pub fn forward_logits(
    params: &PolicyParameters,
    condition: &Condition,
    prefix: &TokenSequence,
) -> Result<Tensor> {
    check_prefix(&params.config, condition, &prefix.tokens)?;
    let (mut dec, first) = Decoder::start(params, condition)?;
    let mut data = first;
    for &t in &prefix.tokens {
        data.extend(dec.step(t)?);
    }
    Ok(Tensor::matrix(prefix.len() + 1, params.config.vocab_size, data)?)
}

/// Teacher-forced per-token log-probabilities without gradients.
pub fn sequence_logprob(
    params: &PolicyParameters,
    condition: &Condition,
    tokens: &TokenSequence,
    guidance: Option<f64>,
    temperature: f64,
) -> Result<Vec<f64>> {
    check_sequence(&params.config, &tokens.tokens)?;
    check_temperature(temperature)?;
    let (mut cond, mut lc) = Decoder::start(params, condition)?;
    let mut uncond = match guidance {
        Some(_) => Some(Decoder::start(params, &Condition::Null)?),
        None => None,
    };
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.tokens.iter().enumerate() {
        let mut row = match (&uncond, guidance) {
            (Some((_, lu)), Some(s)) => mix_logits(&lc, lu, s)
                .map_err(|e| PolicyError::Contract(e.to_string()))?,
            _ => lc.clone(),
        };
        if temperature != 1.0 {
            row.iter_mut().for_each(|v| *v *= 1.0 / temperature);
        }
        out.push(log_softmax_row(&row)[tok]);
        if t + 1 < tokens.len() {
            lc = cond.step(tok)?;
            if let Some((dec, lu)) = uncond.as_mut() {
                *lu = dec.step(tok)?;
            }
        }
    }
    Ok(out)
}
