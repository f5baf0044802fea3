//! Per-rollout rewards under three supervision regimes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, Trajectory};
use crate::tasks::{extract_answer, verify, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Ground-truth verifier.
    Oracle,
    /// Agreement with the group's modal answer.
    MajorityVote,
    /// One minus the length-normalised behaviour entropy.
    Entropy,
}

impl RewardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Oracle => "oracle",
            RewardMode::MajorityVote => "majority_vote",
            RewardMode::Entropy => "entropy",
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(RewardMode::Oracle),
            "majority_vote" => Ok(RewardMode::MajorityVote),
            "entropy" => Ok(RewardMode::Entropy),
            other => Err(Error::Config(format!("unknown reward mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub values: Vec<f64>,
    pub mode: RewardMode,
}

impl RewardVector {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

pub fn oracle_reward(prompt: &Prompt, group: &[Trajectory]) -> RewardVector {
    RewardVector {
        values: group
            .iter()
            .map(|y| if verify(prompt, y) { 1.0 } else { 0.0 })
            .collect(),
        mode: RewardMode::Oracle,
    }
}

/// Reward 1 for rollouts whose extracted answer equals the group's modal
/// answer. Ties between modes go to the lexicographically smallest token
/// sequence; rollouts whose answer fails to parse never count toward the
/// mode and always score 0.
pub fn majority_vote_reward(group: &[Trajectory], answer_len: usize) -> RewardVector {
    let answers: Vec<Option<&[Token]>> = group.iter().map(|y| extract_answer(&y.tokens, answer_len)).collect();
    let mut counts: BTreeMap<&[Token], usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
    let mut mode: Option<(&[Token], usize)> = None;
    for (answer, &count) in &counts {
        if mode.is_none_or(|(_, best)| count > best) {
            mode = Some((answer, count));
        }
    }
    let values = answers
        .iter()
        .map(|a| match (a, mode) {
            (Some(a), Some((m, _))) if *a == m => 1.0,
            _ => 0.0,
        })
        .collect();
    RewardVector {
        values,
        mode: RewardMode::MajorityVote,
    }
}

/// `R_i = 1 - (1/T_i) Σ_t H_t / log|V|` using the entropies recorded at
/// rollout time.
pub fn entropy_reward(group: &[Trajectory], vocab_size: usize) -> Result<RewardVector> {
    if vocab_size < 2 {
        return Err(Error::Config(format!(
            "entropy normalisation needs |V| >= 2, got {vocab_size}"
        )));
    }
    let log_v = (vocab_size as f64).ln();
    let values = group
        .iter()
        .map(|y| (1.0 - normalized_entropy(y, log_v)).clamp(0.0, 1.0))
        .collect();
    Ok(RewardVector {
        values,
        mode: RewardMode::Entropy,
    })
}

/// Mean per-step entropy divided by `log|V|`.
pub(crate) fn normalized_entropy(traj: &Trajectory, log_v: f64) -> f64 {
    if traj.per_step_entropy.is_empty() {
        return 0.0;
    }
    let total: f64 = traj.per_step_entropy.iter().sum();
    total / traj.per_step_entropy.len() as f64 / log_v
}

pub fn compute_rewards(
    mode: RewardMode,
    prompt: &Prompt,
    group: &[Trajectory],
    vocab_size: usize,
) -> Result<RewardVector> {
    match mode {
        RewardMode::Oracle => Ok(oracle_reward(prompt, group)),
        RewardMode::MajorityVote => Ok(majority_vote_reward(group, prompt.answer.len())),
        RewardMode::Entropy => entropy_reward(group, vocab_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(tokens: Vec<Token>) -> Trajectory {
        let n = tokens.len();
        Trajectory {
            prompt_id: 0,
            tokens,
            behavior_logprobs: vec![0.0; n],
            per_step_entropy: vec![0.0; n],
        }
    }

    fn prompt(answer: Vec<Token>) -> Prompt {
        Prompt {
            id: 0,
            difficulty: 0,
            context_tokens: vec![0],
            answer,
        }
    }

    #[test]
    fn oracle_examples() {
        let p = prompt(vec![2]);
        let all: Vec<_> = (0..4).map(|_| traj(vec![0, 2])).collect();
        assert_eq!(oracle_reward(&p, &all).values, vec![1.0; 4]);
        let none: Vec<_> = (0..4).map(|_| traj(vec![])).collect();
        assert_eq!(oracle_reward(&p, &none).values, vec![0.0; 4]);
        let mixed: Vec<_> = [2, 1, 2, 0, 3, 2, 1, 1].iter().map(|&a| traj(vec![0, a])).collect();
        let r = oracle_reward(&p, &mixed);
        assert_eq!(r.values.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn majority_examples() {
        let same: Vec<_> = (0..8).map(|_| traj(vec![1, 3])).collect();
        assert_eq!(majority_vote_reward(&same, 1).values, vec![1.0; 8]);

        let split: Vec<_> = [3, 3, 1, 3, 1, 3, 1, 3].iter().map(|&a| traj(vec![a])).collect();
        let r = majority_vote_reward(&split, 1);
        assert_eq!(r.values, vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let tie: Vec<_> = [2, 1, 2, 1, 1, 2, 2, 1].iter().map(|&a| traj(vec![a])).collect();
        let r = majority_vote_reward(&tie, 1);
        assert_eq!(r.values, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn parse_failures_never_win() {
        // Three failures outnumber the two parsed answers but cannot be the mode.
        let group = vec![
            traj(vec![]),
            traj(vec![]),
            traj(vec![]),
            traj(vec![0, 2]),
            traj(vec![1, 2]),
        ];
        let r = majority_vote_reward(&group, 2);
        assert_eq!(r.values, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        let mut greedy = traj(vec![0, 0]);
        greedy.per_step_entropy = vec![0.0, 0.0];
        let mut uniform = traj(vec![0, 0]);
        uniform.per_step_entropy = vec![4f64.ln(); 2];
        let mut mixed = traj(vec![0, 0]);
        mixed.per_step_entropy = vec![0.2 * 4f64.ln(), 0.4 * 4f64.ln()];
        let r = entropy_reward(&[greedy, uniform, mixed], 4).unwrap();
        assert_eq!(r.values[0], 1.0);
        assert_eq!(r.values[1], 0.0);
        assert!((r.values[2] - 0.7).abs() < 1e-12);
        assert!(entropy_reward(&[], 1).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [RewardMode::Oracle, RewardMode::MajorityVote, RewardMode::Entropy] {
            assert_eq!(m.as_str().parse::<RewardMode>().unwrap(), m);
        }
        assert!("verifier".parse::<RewardMode>().is_err());
    }

    proptest! {
        #[test]
        fn majority_vote_is_order_invariant(
            answers in prop::collection::vec(0usize..3, 1..10),
            rotate in 0usize..10,
        ) {
            let group: Vec<_> = answers.iter().map(|&a| traj(vec![a])).collect();
            let r = majority_vote_reward(&group, 1);
            let k = rotate % group.len();
            let mut rotated = group.clone();
            rotated.rotate_left(k);
            let mut expected = r.values.clone();
            expected.rotate_left(k);
            prop_assert_eq!(majority_vote_reward(&rotated, 1).values, expected);
            prop_assert!(r.values.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }
}
