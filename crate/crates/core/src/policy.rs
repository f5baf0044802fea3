//! Tabular autoregressive softmax policy.
//!
//! Logits are keyed by `(prompt, position, previous token)`. Position 0 has a
//! single start context per prompt; every later position has one context per
//! possible previous token, so a prompt owns `1 + (max_len - 1) * vocab_size`
//! contexts and each context owns `vocab_size` logits.
//!
//! # Snapshot layout
//!
//! [`PolicyParams::to_bytes`] writes, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"VCPL"`                         |
//! | 4      | 4    | format version, `u32`, currently 1      |
//! | 8      | 8    | `vocab_size`, `u64`                     |
//! | 16     | 8    | `max_len`, `u64`                        |
//! | 24     | 8    | `num_prompts`, `u64`                    |
//! | 32     | 8    | `context_count`, `u64`                  |
//! | 40     | 8·n  | logits, `f64`, context-major            |
//!
//! Contexts are ordered by prompt, then position, then previous token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::GradientVector;

pub type Token = usize;

const MAGIC: &[u8; 4] = b"VCPL";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
}

impl PolicyShape {
    pub fn contexts_per_prompt(&self) -> usize {
        1 + (self.max_len - 1) * self.vocab_size
    }

    pub fn context_count(&self) -> usize {
        self.num_prompts * self.contexts_per_prompt()
    }

    pub fn param_count(&self) -> usize {
        self.context_count() * self.vocab_size
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_len == 0 || self.num_prompts == 0 {
            return Err(Error::Config(format!(
                "policy shape must be positive in every dimension, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A context: which prompt, which position, and the token emitted just
/// before it (`None` only at position 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextKey {
    pub prompt: usize,
    pub position: usize,
    pub previous: Option<Token>,
}

impl ContextKey {
    pub fn start(prompt: usize) -> Self {
        Self {
            prompt,
            position: 0,
            previous: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
    /// `log π_old(a_t | s_t)` at the sampling temperature.
    pub behavior_logprobs: Vec<f64>,
    /// Entropy in nats of the sampling distribution at each step.
    pub per_step_entropy: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn context(&self, t: usize) -> ContextKey {
        ContextKey {
            prompt: self.prompt_id,
            position: t,
            previous: if t == 0 { None } else { Some(self.tokens[t - 1]) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            logits: vec![0.0; shape.param_count()],
        })
    }

    pub fn from_logits(shape: PolicyShape, logits: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if logits.len() != shape.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for a shape needing {}",
                logits.len(),
                shape.param_count()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite logit {bad}")));
        }
        Ok(Self { shape, logits })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.shape.max_len
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn context_index(&self, ctx: &ContextKey) -> Result<usize> {
        let s = &self.shape;
        let unknown = || Error::UnknownContext {
            prompt: ctx.prompt,
            position: ctx.position,
            previous: ctx.previous,
        };
        if ctx.prompt >= s.num_prompts || ctx.position >= s.max_len {
            return Err(unknown());
        }
        let local = match (ctx.position, ctx.previous) {
            (0, None) => 0,
            (p, Some(prev)) if p > 0 && prev < s.vocab_size => 1 + (p - 1) * s.vocab_size + prev,
            _ => return Err(unknown()),
        };
        Ok(ctx.prompt * s.contexts_per_prompt() + local)
    }

    /// Offset of the first logit of a context in the flat parameter vector.
    pub fn block_offset(&self, ctx: &ContextKey) -> Result<usize> {
        Ok(self.context_index(ctx)? * self.shape.vocab_size)
    }

    pub fn logits(&self, ctx: &ContextKey) -> Result<&[f64]> {
        let off = self.block_offset(ctx)?;
        Ok(&self.logits[off..off + self.shape.vocab_size])
    }

    pub fn logits_mut(&mut self, ctx: &ContextKey) -> Result<&mut [f64]> {
        let off = self.block_offset(ctx)?;
        let v = self.shape.vocab_size;
        Ok(&mut self.logits[off..off + v])
    }

    /// Every context of one prompt, in storage order.
    pub fn prompt_contexts(&self, prompt: usize) -> Vec<ContextKey> {
        let mut out = vec![ContextKey::start(prompt)];
        for position in 1..self.shape.max_len {
            for prev in 0..self.shape.vocab_size {
                out.push(ContextKey {
                    prompt,
                    position,
                    previous: Some(prev),
                });
            }
        }
        out
    }

    pub fn token_distribution(&self, ctx: &ContextKey, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(softmax(self.logits(ctx)?, temperature))
    }

    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prompt_id: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let t_max = self.shape.max_len;
        let mut traj = Trajectory {
            prompt_id,
            tokens: Vec::with_capacity(t_max),
            behavior_logprobs: Vec::with_capacity(t_max),
            per_step_entropy: Vec::with_capacity(t_max),
        };
        for t in 0..t_max {
            let dist = self.token_distribution(&traj.context(t), temperature)?;
            let token = sample_categorical(&dist, rng);
            traj.behavior_logprobs.push(dist[token].ln());
            traj.per_step_entropy.push(step_entropy(&dist)?);
            traj.tokens.push(token);
        }
        Ok(traj)
    }

    /// Most likely trajectory, ties to the smallest token.
    pub fn greedy_trajectory(&self, prompt_id: usize) -> Result<Trajectory> {
        let mut traj = Trajectory {
            prompt_id,
            tokens: Vec::new(),
            behavior_logprobs: Vec::new(),
            per_step_entropy: Vec::new(),
        };
        for t in 0..self.shape.max_len {
            let dist = self.token_distribution(&traj.context(t), 1.0)?;
            let token = argmax(&dist);
            traj.behavior_logprobs.push(dist[token].ln());
            traj.per_step_entropy.push(step_entropy(&dist)?);
            traj.tokens.push(token);
        }
        Ok(traj)
    }

    /// `log π(a_t | s_t)` at temperature 1 for one step.
    pub fn token_log_prob(&self, ctx: &ContextKey, action: Token) -> Result<f64> {
        self.check_token(action)?;
        Ok(log_softmax(self.logits(ctx)?)[action])
    }

    pub fn sequence_log_prob(&self, traj: &Trajectory) -> Result<f64> {
        let mut total = 0.0;
        for (t, &a) in traj.tokens.iter().enumerate() {
            total += self.token_log_prob(&traj.context(t), a)?;
        }
        Ok(total)
    }

    /// `∇_θ log π(action | ctx)`: `one_hot(action) - p` in the context's block.
    pub fn grad_log_prob(&self, ctx: &ContextKey, action: Token) -> Result<GradientVector> {
        self.check_token(action)?;
        let off = self.block_offset(ctx)?;
        let p = softmax(self.logits(ctx)?, 1.0);
        let mut g = GradientVector::zeros(self.dim());
        for (k, pk) in p.iter().enumerate() {
            g[off + k] = if k == action { 1.0 - pk } else { -pk };
        }
        Ok(g)
    }

    /// `θ ← θ + scale · g`
    pub fn add_scaled(&mut self, g: &GradientVector, scale: f64) -> Result<()> {
        g.check_dim(self.dim())?;
        for (w, d) in self.logits.iter_mut().zip(g.as_slice()) {
            *w += scale * d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }

    pub fn check_token(&self, token: Token) -> Result<()> {
        if token >= self.shape.vocab_size {
            return Err(Error::InvalidToken {
                token,
                vocab_size: self.shape.vocab_size,
            });
        }
        Ok(())
    }

    /// Checks that a trajectory could have come from this parameter table.
    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        if traj.tokens.is_empty() || traj.tokens.len() > self.shape.max_len {
            return Err(Error::ShapeMismatch(format!(
                "trajectory length {} outside 1..={}",
                traj.tokens.len(),
                self.shape.max_len
            )));
        }
        if traj.behavior_logprobs.len() != traj.tokens.len() || traj.per_step_entropy.len() != traj.tokens.len() {
            return Err(Error::ShapeMismatch(
                "trajectory per-step records differ in length from its tokens".into(),
            ));
        }
        for &a in &traj.tokens {
            self.check_token(a)?;
        }
        self.context_index(&ContextKey::start(traj.prompt_id))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.logits.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [s.vocab_size, s.max_len, s.num_prompts, s.context_count()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for w in &self.logits {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Parse {
            line: 0,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
            return Err(bad("missing policy snapshot header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported snapshot version {version}")));
        }
        let field = |i: usize| {
            let at = 8 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        };
        let shape = PolicyShape {
            vocab_size: field(0),
            max_len: field(1),
            num_prompts: field(2),
        };
        shape.validate()?;
        if field(3) != shape.context_count() {
            return Err(bad("context count disagrees with shape"));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * shape.param_count() {
            return Err(bad("logit payload has the wrong length"));
        }
        let logits = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_logits(shape, logits)
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Shannon entropy in nats, with `0 · log 0 = 0`.
pub fn step_entropy(dist: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in dist {
        if p < 0.0 {
            return Err(Error::NegativeProbability(p));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    // Rounding can push a deterministic distribution to -0.0 or a hair below.
    Ok(h.max(0.0))
}

pub fn sample_categorical<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum; take the last
    // token with positive mass.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
