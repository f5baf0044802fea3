//! Synthetic verifiable prompts.
//!
//! A prompt at difficulty `d` carries random context tokens drawn from an
//! answer alphabet of size `A`; its answer is the sum of the last `d + 1`
//! context tokens modulo `A^answer_len`, written as `answer_len` base-`A`
//! digits, most significant first. Difficulty 0 is the identity task: the
//! answer is the last context token.
//!
//! # Export format
//!
//! One record per line, four tab-separated columns in this order:
//!
//! ```text
//! id <TAB> difficulty <TAB> context tokens <TAB> answer tokens
//! ```
//!
//! Token columns are space-separated decimal integers. Lines starting with
//! `#` are comments; [`Dataset::to_records`] writes one header comment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ContextKey, PolicyParams, PolicyShape, Token, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub answer_alphabet: usize,
    #[serde(default = "default_answer_len")]
    pub answer_len: usize,
    pub context_len: usize,
    /// Trajectory length; the last `answer_len` tokens are the answer.
    pub max_len: usize,
    /// Number of prompts at each difficulty level, level 0 first.
    pub counts: Vec<usize>,
}

fn default_answer_len() -> usize {
    1
}

impl TaskConfig {
    pub fn levels(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.counts.is_empty() || self.counts.contains(&0) {
            return fail(format!(
                "every difficulty level needs a positive count, got {:?}",
                self.counts
            ));
        }
        if self.answer_alphabet < 2 {
            return fail(format!(
                "answer alphabet must have at least 2 symbols, got {}",
                self.answer_alphabet
            ));
        }
        if self.answer_alphabet > self.vocab_size {
            return fail(format!(
                "answer alphabet of {} symbols does not fit a vocabulary of {}",
                self.answer_alphabet, self.vocab_size
            ));
        }
        if self.answer_len == 0 || self.answer_len > self.max_len {
            return fail(format!(
                "answer length {} must be in 1..={}",
                self.answer_len, self.max_len
            ));
        }
        if self.context_len < self.levels() {
            return fail(format!(
                "context of {} tokens cannot hold the {} operands of the hardest level",
                self.context_len,
                self.levels()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub difficulty: u32,
    pub context_tokens: Vec<Token>,
    pub answer: Vec<Token>,
}

impl Prompt {
    /// Token the reference policy favours at `position` of a trajectory of
    /// length `max_len`: the answer digits at the tail, otherwise a copy of
    /// the context.
    pub fn preferred_token(&self, position: usize, max_len: usize) -> Token {
        let answer_start = max_len - self.answer.len();
        if position >= answer_start {
            self.answer[position - answer_start]
        } else {
            self.context_tokens[position % self.context_tokens.len()]
        }
    }

    /// Token on the reference policy's systematic-error path at `position`:
    /// the preferred token shifted by one, staying inside the answer
    /// alphabet at answer positions. Never equal to the preferred token.
    pub fn shortcut_token(&self, position: usize, max_len: usize, alphabet: usize, vocab_size: usize) -> Token {
        let answer_start = max_len - self.answer.len();
        let preferred = self.preferred_token(position, max_len);
        if position >= answer_start {
            (preferred + 1) % alphabet
        } else {
            (preferred + 1) % vocab_size
        }
    }

    /// The greedy trajectory's token string under the reference policy;
    /// always verifies.
    pub fn solution(&self, max_len: usize) -> Vec<Token> {
        (0..max_len).map(|t| self.preferred_token(t, max_len)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub prompts: Vec<Prompt>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn policy_shape(&self) -> PolicyShape {
        PolicyShape {
            vocab_size: self.config.vocab_size,
            max_len: self.config.max_len,
            num_prompts: self.prompts.len(),
        }
    }

    pub fn counts_per_level(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.levels()];
        for p in &self.prompts {
            counts[p.difficulty as usize] += 1;
        }
        counts
    }

    pub fn to_records(&self) -> String {
        let mut out = String::from("# id\tdifficulty\tcontext\tanswer\n");
        for p in &self.prompts {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                p.id,
                p.difficulty,
                join_tokens(&p.context_tokens),
                join_tokens(&p.answer)
            ));
        }
        out
    }

    /// Reads prompts written by [`Dataset::to_records`]. The task
    /// configuration and seed are not part of the records and must be
    /// supplied.
    pub fn from_records(text: &str, config: TaskConfig, seed: u64) -> Result<Self> {
        let mut prompts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Parse { line: line_no, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
            }
            let id = cols[0].parse().map_err(|e| bad(format!("id: {e}")))?;
            let difficulty = cols[1].parse().map_err(|e| bad(format!("difficulty: {e}")))?;
            let context_tokens = parse_tokens(cols[2]).map_err(|e| bad(format!("context: {e}")))?;
            let answer = parse_tokens(cols[3]).map_err(|e| bad(format!("answer: {e}")))?;
            prompts.push(Prompt {
                id,
                difficulty,
                context_tokens,
                answer,
            });
        }
        let ds = Self { config, seed, prompts };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (i, p) in self.prompts.iter().enumerate() {
            if p.id != i {
                return Err(Error::Config(format!(
                    "prompt ids must be 0..n in order; found {} at {i}",
                    p.id
                )));
            }
            if p.difficulty as usize >= self.config.levels() {
                return Err(Error::Config(format!(
                    "prompt {i} has unknown difficulty {}",
                    p.difficulty
                )));
            }
            if p.answer.len() != self.config.answer_len || p.answer.iter().any(|&a| a >= self.config.answer_alphabet) {
                return Err(Error::Config(format!("prompt {i} has an answer outside the alphabet")));
            }
            if p.context_tokens.len() != self.config.context_len {
                return Err(Error::Config(format!("prompt {i} has the wrong context length")));
            }
        }
        Ok(())
    }
}

fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(s: &str) -> std::result::Result<Vec<Token>, std::num::ParseIntError> {
    s.split_whitespace().map(str::parse).collect()
}

fn answer_for(context: &[Token], difficulty: u32, alphabet: usize, answer_len: usize) -> Vec<Token> {
    let operands = difficulty as usize + 1;
    let modulus = alphabet.pow(answer_len as u32);
    let mut value = context[context.len() - operands..].iter().sum::<usize>() % modulus;
    let mut digits = vec![0; answer_len];
    for d in digits.iter_mut().rev() {
        *d = value % alphabet;
        value /= alphabet;
    }
    digits
}

pub fn generate_dataset(config: &TaskConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(config.counts.iter().sum());
    for (level, &count) in config.counts.iter().enumerate() {
        for _ in 0..count {
            let context_tokens: Vec<Token> = (0..config.context_len)
                .map(|_| rng.random_range(0..config.answer_alphabet))
                .collect();
            let answer = answer_for(&context_tokens, level as u32, config.answer_alphabet, config.answer_len);
            prompts.push(Prompt {
                id: prompts.len(),
                difficulty: level as u32,
                context_tokens,
                answer,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        prompts,
    })
}

/// True iff the trajectory ends with exactly the prompt's answer tokens.
/// Trajectories shorter than the answer fail to parse and verify false.
pub fn verify(prompt: &Prompt, traj: &Trajectory) -> bool {
    extract_answer(&traj.tokens, prompt.answer.len()) == Some(&prompt.answer[..])
}

/// The final `answer_len` tokens, or `None` when the output is too short.
pub fn extract_answer(tokens: &[Token], answer_len: usize) -> Option<&[Token]> {
    (tokens.len() >= answer_len).then(|| &tokens[tokens.len() - answer_len..])
}

/// Reference policy: along the solution path (the start context and every
/// context whose previous token is the preferred token of the position
/// before, see [`Prompt::preferred_token`]) the preferred token's logit is
/// raised by the sharpness of the prompt's difficulty level. Off-path
/// contexts and all other logits stay zero. `sharpness[d]` is the boost for
/// level `d`.
pub fn init_reference_policy(dataset: &Dataset, sharpness: &[f64]) -> Result<PolicyParams> {
    if let Some(bad) = sharpness.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!(
            "sharpness must be finite and non-negative, got {bad}"
        )));
    }
    let mut params = PolicyParams::zeros(dataset.policy_shape())?;
    let max_len = dataset.config.max_len;
    for prompt in &dataset.prompts {
        let boost = *sharpness.get(prompt.difficulty as usize).ok_or_else(|| {
            Error::Config(format!(
                "sharpness schedule has {} levels but difficulty {} occurs",
                sharpness.len(),
                prompt.difficulty
            ))
        })?;
        let contexts: Vec<ContextKey> = params.prompt_contexts(prompt.id);
        for ctx in contexts {
            let on_path = ctx
                .previous
                .is_none_or(|prev| prev == prompt.preferred_token(ctx.position - 1, max_len));
            if on_path {
                let favored = prompt.preferred_token(ctx.position, max_len);
                params.logits_mut(&ctx)?[favored] += boost;
            }
        }
    }
    Ok(params)
}

/// [`init_reference_policy`] plus a confidently wrong path per prompt.
///
/// With strength `h = shortcut[d] > 0`, the start context also boosts the
/// first shortcut token by `h`, and every context reached by following the
/// shortcut path (position `p ≥ 1`, previous token the shortcut token of
/// `p − 1`) favours the next shortcut token by `h`. The path ends in a wrong answer. An empty `shortcut` slice leaves
/// the plain reference policy.
pub fn init_reference_policy_with_shortcut(
    dataset: &Dataset,
    sharpness: &[f64],
    shortcut: &[f64],
) -> Result<PolicyParams> {
    let mut params = init_reference_policy(dataset, sharpness)?;
    if shortcut.is_empty() {
        return Ok(params);
    }
    if shortcut.len() != dataset.config.levels() {
        return Err(Error::Config(format!(
            "shortcut schedule has {} levels, dataset has {}",
            shortcut.len(),
            dataset.config.levels()
        )));
    }
    if let Some(bad) = shortcut.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!(
            "shortcut strength must be finite and non-negative, got {bad}"
        )));
    }
    let cfg = &dataset.config;
    let t_max = cfg.max_len;
    for prompt in &dataset.prompts {
        let d = prompt.difficulty as usize;
        let h = shortcut[d];
        if h == 0.0 {
            continue;
        }
        let wrong = |p: usize| prompt.shortcut_token(p, t_max, cfg.answer_alphabet, cfg.vocab_size);
        params.logits_mut(&ContextKey::start(prompt.id))?[wrong(0)] += h;
        for p in 1..t_max {
            let ctx = ContextKey {
                prompt: prompt.id,
                position: p,
                previous: Some(wrong(p - 1)),
            };
            params.logits_mut(&ctx)?[wrong(p)] += h;
        }
    }
    Ok(params)
}
