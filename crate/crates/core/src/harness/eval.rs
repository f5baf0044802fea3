//! Sampled and greedy evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::seed;
use crate::policy::PolicyParams;
use crate::tasks::{verify, Prompt};

/// Unbiased pass@k for one prompt: `1 − C(n−c, k)/C(n, k)`, evaluated as
/// `1 − ∏_{i=n−c+1}^{n} (1 − k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || n < k {
        return Err(Error::Config(format!("pass@{k} needs 1 <= k <= n = {n}")));
    }
    if c > n {
        return Err(Error::Config(format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `(k, mean pass@k)` in the order requested.
    pub pass_at: Vec<(usize, f64)>,
    pub greedy_pass_at_1: f64,
    pub correct_counts: Vec<usize>,
}

impl EvalResult {
    pub fn pass(&self, k: usize) -> Option<f64> {
        self.pass_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Draws `n` temperature-1 samples per prompt, each prompt on its own
/// substream, and averages pass@k over prompts.
pub fn evaluate_pass_at_k(
    params: &PolicyParams,
    prompts: &[Prompt],
    n: usize,
    ks: &[usize],
    master_seed: u64,
    step: usize,
) -> Result<EvalResult> {
    if prompts.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    for &k in ks {
        pass_at_k(n, 0, k)?;
    }
    let per_prompt = prompts
        .par_iter()
        .map(|p| -> Result<(usize, bool)> {
            let mut rng = seed::substream(master_seed, seed::EVAL, &[step as u64, p.id as u64]);
            let mut correct = 0;
            for _ in 0..n {
                if verify(p, &params.sample_trajectory(p.id, 1.0, &mut rng)?) {
                    correct += 1;
                }
            }
            Ok((correct, verify(p, &params.greedy_trajectory(p.id)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = prompts.len() as f64;
    let pass_at = ks
        .iter()
        .map(|&k| {
            let total = per_prompt
                .iter()
                .map(|(c, _)| pass_at_k(n, *c, k))
                .sum::<Result<f64>>()?;
            Ok((k, total / m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult {
        pass_at,
        greedy_pass_at_1: per_prompt.iter().filter(|(_, g)| *g).count() as f64 / m,
        correct_counts: per_prompt.iter().map(|(c, _)| *c).collect(),
    })
}
