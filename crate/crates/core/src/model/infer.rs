//! Tape-free incremental forward pass with cached keys and values, and the
//! generation loop built on it. Every row goes through the same kernels in the
//! same order as the graph forward, so logits match [`Model::lm_forward`].

use serde::{Deserialize, Serialize};

use super::params::{BlockSlots, Model};
use super::ModelError;
use crate::decoder::{CallDecoder, DecoderState};
use crate::numerics::{kernels, Rng, Tensor};
use crate::tokenizer::{IMG, NEXA_END};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Off,
    GrammarMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub constraint: Constraint,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens: 128,
            constraint: Constraint::GrammarMask,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_new_tokens == 0 {
            return Err(ModelError::InvalidConfig(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if let DecodeMode::Sample { temperature } = self.mode {
            if !(temperature > 0.0) {
                return Err(ModelError::InvalidConfig(
                    "sampling temperature must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let c = gamma.len();
    let mut xhat = vec![0.0; x.len()];
    kernels::layer_norm_rows(x, c, &mut xhat);
    for row in xhat.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    xhat
}

fn linear(x: &[f32], w: &Tensor, rows: usize) -> Vec<f32> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n];
    kernels::matmul_acc(x, w.data(), &mut out, rows, k, n);
    out
}

fn add_row(x: &mut [f32], b: &[f32]) {
    for row in x.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, c)| *v += c);
    }
}

/// Decoding state of one sequence: cached keys/values per layer.
#[derive(Clone, Debug)]
pub struct InferenceSession<'m> {
    model: &'m Model,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    last_hidden: Vec<f32>,
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Model) -> Self {
        let n = model.config().n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            last_hidden: Vec::new(),
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.model.config().context_len - self.len
    }

    /// Appends `[rows × d_model]` soft-prefix embeddings.
    pub fn push_prefix(&mut self, prefix: &Tensor) -> Result<(), ModelError> {
        let d = self.model.config().d_model;
        if prefix.cols() != d {
            return Err(ModelError::ShapeMismatch(format!(
                "prefix {:?} for d_model {d}",
                prefix.shape()
            )));
        }
        self.push_rows(prefix.data().to_vec(), prefix.rows())
    }

    /// Appends token embeddings and returns the next-token logits after the last one.
    pub fn push_tokens(&mut self, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let cfg = self.model.config();
        let table = &self.model.params.tensors[self.model.slots().tok_emb];
        let mut x = Vec::with_capacity(tokens.len() * cfg.d_model);
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::InvalidToken {
                    id: t,
                    size: cfg.vocab_size,
                });
            }
            x.extend_from_slice(table.row(t as usize));
        }
        self.push_rows(x, tokens.len())?;
        Ok(self.logits())
    }

    /// Next-token logits at the most recent position.
    pub fn logits(&self) -> Vec<f32> {
        let table = &self.model.params.tensors[self.model.slots().tok_emb];
        let mut out = vec![0.0; table.rows()];
        kernels::matmul_nt_acc(
            &self.last_hidden,
            table.data(),
            &mut out,
            1,
            table.cols(),
            table.rows(),
        );
        out
    }

    fn push_rows(&mut self, mut x: Vec<f32>, rows: usize) -> Result<(), ModelError> {
        if rows == 0 {
            return Ok(());
        }
        let model = self.model;
        let cfg = model.config();
        let s = model.slots();
        let t = &model.params.tensors;
        let d = cfg.d_model;
        if self.len + rows > cfg.context_len {
            return Err(ModelError::ContextOverflow {
                needed: self.len + rows,
                limit: cfg.context_len,
            });
        }
        let pos = t[s.pos_emb].data();
        for (r, row) in x.chunks_mut(d).enumerate() {
            let p = &pos[(self.len + r) * d..(self.len + r + 1) * d];
            row.iter_mut().zip(p).for_each(|(v, q)| *v += q);
        }
        for (l, b) in s.lm_blocks.iter().enumerate() {
            x = self.block(l, b, x, rows);
        }
        self.len += rows;
        let last = layer_norm(
            &x[(rows - 1) * d..],
            t[s.lm_ln_g].data(),
            t[s.lm_ln_b].data(),
        );
        self.last_hidden = last;
        Ok(())
    }

    fn block(&mut self, layer: usize, b: &BlockSlots, x: Vec<f32>, rows: usize) -> Vec<f32> {
        let cfg = self.model.config();
        let t = &self.model.params.tensors;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let h = layer_norm(&x, t[b.ln1_g].data(), t[b.ln1_b].data());
        let q = linear(&h, &t[b.wq], rows);
        self.keys[layer].extend(linear(&h, &t[b.wk], rows));
        self.values[layer].extend(linear(&h, &t[b.wv], rows));
        let (kc, vc) = (&self.keys[layer], &self.values[layer]);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut att = vec![0.0; rows * d];
        let mut probs = vec![0.0; self.len + rows];
        for hd in 0..heads {
            let col = hd * dh;
            for i in 0..rows {
                let lim = self.len + i + 1;
                let qi = &q[i * d + col..i * d + col + dh];
                let prow = &mut probs[..lim];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p = kernels::dot(qi, &kc[j * d + col..j * d + col + dh]) * scale;
                }
                kernels::softmax_in_place(prow);
                let orow = &mut att[i * d + col..i * d + col + dh];
                for (j, &p) in prow.iter().enumerate() {
                    kernels::axpy(p, &vc[j * d + col..j * d + col + dh], orow);
                }
            }
        }
        let mut a = linear(&att, &t[b.wo], rows);
        add_row(&mut a, t[b.bo].data());
        let x: Vec<f32> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let h = layer_norm(&x, t[b.ln2_g].data(), t[b.ln2_b].data());
        let mut h = linear(&h, &t[b.w1], rows);
        add_row(&mut h, t[b.b1].data());
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut h = linear(&h, &t[b.w2], rows);
        add_row(&mut h, t[b.b2].data());
        x.iter().zip(&h).map(|(u, v)| u + v).collect()
    }
}

fn argmax_masked(logits: &[f32], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if mask.map_or(true, |m| m[i]) && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn sample_masked(
    logits: &[f32],
    mask: Option<&[bool]>,
    temperature: f32,
    rng: &mut Rng,
) -> Option<usize> {
    let allowed = |i: usize| mask.map_or(true, |m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return None;
    }
    let weights: Vec<f32> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if allowed(i) {
                ((v - max) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    Some(rng.categorical(&weights))
}

impl Model {
    /// Opens a session over `prompt`. With `pixels` and a leading `<img>`, the
    /// image prefix replaces that token, exactly as in [`Model::lm_forward`].
    pub fn start_session(
        &self,
        pixels: Option<&[f32]>,
        prompt: &[u32],
    ) -> Result<(InferenceSession<'_>, Vec<f32>), ModelError> {
        let mut session = InferenceSession::new(self);
        let text = match pixels {
            Some(px) if prompt.first() == Some(&IMG) => {
                let prefix = self.image_prefix(px)?;
                let needed = self.config().n_prefix + prompt.len() - 1;
                if needed > self.config().context_len {
                    return Err(ModelError::ContextOverflow {
                        needed,
                        limit: self.config().context_len,
                    });
                }
                session.push_prefix(&prefix)?;
                &prompt[1..]
            }
            _ => prompt,
        };
        let logits = if text.is_empty() {
            session.logits()
        } else {
            session.push_tokens(text)?
        };
        Ok((session, logits))
    }

    /// Autoregressive decoding after `prompt`. Stops after `<nexa_end>`, after
    /// `max_new_tokens`, or when the context is full. With the grammar constraint,
    /// every step is restricted to the tokens `grammar` allows.
    pub fn generate(
        &self,
        pixels: Option<&[f32]>,
        prompt: &[u32],
        config: &GenerationConfig,
        grammar: Option<&CallDecoder>,
        rng: &mut Rng,
    ) -> Result<Vec<u32>, ModelError> {
        self.generate_observed(pixels, prompt, config, grammar, rng, &mut |_| {})
    }

    /// [`Model::generate`] that reports each token to `on_token` as soon as it is chosen.
    pub fn generate_observed(
        &self,
        pixels: Option<&[f32]>,
        prompt: &[u32],
        config: &GenerationConfig,
        grammar: Option<&CallDecoder>,
        rng: &mut Rng,
        on_token: &mut dyn FnMut(u32),
    ) -> Result<Vec<u32>, ModelError> {
        config.validate()?;
        if prompt.is_empty() {
            return Err(ModelError::ShapeMismatch(
                "generation needs a non-empty prompt".into(),
            ));
        }
        let grammar = match config.constraint {
            Constraint::Off => None,
            Constraint::GrammarMask => Some(grammar.ok_or_else(|| {
                ModelError::InvalidConfig("grammar constraint requested without a decoder".into())
            })?),
        };
        let (mut session, mut logits) = self.start_session(pixels, prompt)?;
        let mut state = DecoderState::new();
        let mut out = Vec::new();
        while out.len() < config.max_new_tokens {
            let mask = grammar.map(|g| g.allowed_next(&state));
            let next = match config.mode {
                DecodeMode::Greedy => argmax_masked(&logits, mask.as_deref()),
                DecodeMode::Sample { temperature } => {
                    sample_masked(&logits, mask.as_deref(), temperature, rng)
                }
            };
            let Some(next) = next else { break };
            let next = next as u32;
            out.push(next);
            on_token(next);
            if let Some(g) = grammar {
                g.feed(&mut state, next);
            }
            if next == NEXA_END || out.len() == config.max_new_tokens || session.remaining() == 0 {
                break;
            }
            logits = session.push_tokens(&[next])?;
        }
        Ok(out)
    }
}
