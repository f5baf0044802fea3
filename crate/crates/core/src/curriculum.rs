//! Confidence scoring, retention schedule, batch selection and weights.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Trajectory;
use crate::rewards::normalized_entropy;

/// Confidence of a prompt from its rollouts:
/// `1 - mean_i (1/T_i) Σ_t H_t / log|V|`, using behaviour-policy entropies.
pub fn confidence(trajectories: &[Trajectory], vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::Config(format!("confidence needs |V| >= 2, got {vocab_size}")));
    }
    if trajectories.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let log_v = (vocab_size as f64).ln();
    let u = trajectories.iter().map(|y| normalized_entropy(y, log_v)).sum::<f64>() / trajectories.len() as f64;
    Ok((1.0 - u).clamp(0.0, 1.0))
}

/// Linear annealing from `beta_start` to 1 over `curriculum_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionSchedule {
    pub beta_start: f64,
    pub total_steps: usize,
    pub curriculum_steps: usize,
}

impl RetentionSchedule {
    pub fn new(beta_start: f64, total_steps: usize, curriculum_steps: usize) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= 1.0) {
            return Err(Error::InvalidRetention(beta_start));
        }
        if curriculum_steps == 0 || curriculum_steps > total_steps.max(1) {
            return Err(Error::Config(format!(
                "curriculum steps {curriculum_steps} must be in 1..={}",
                total_steps.max(1)
            )));
        }
        Ok(Self {
            beta_start,
            total_steps,
            curriculum_steps,
        })
    }

    /// Builds the schedule from a fraction of the total steps.
    pub fn from_fraction(beta_start: f64, total_steps: usize, curriculum_fraction: f64) -> Result<Self> {
        if !(curriculum_fraction > 0.0 && curriculum_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "curriculum_fraction must be in (0, 1], got {curriculum_fraction}"
            )));
        }
        let steps = ((curriculum_fraction * total_steps as f64).round() as usize).clamp(1, total_steps.max(1));
        Self::new(beta_start, total_steps, steps)
    }

    pub fn retention(&self, t: usize) -> f64 {
        let progress = t as f64 / self.curriculum_steps as f64;
        (self.beta_start + (1.0 - self.beta_start) * progress).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Keep exactly `max(1, round(β·B))` prompts.
    #[default]
    TopK,
    /// Threshold at the `⌊(1-β)B⌋`-th order statistic and keep `c ≥ τ`.
    LiteralQuantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub masks: Vec<bool>,
    pub tau: f64,
    pub beta_hat: f64,
    pub kept: usize,
}

impl Selection {
    /// `mask / beta_hat` for every prompt.
    pub fn weights(&self) -> Vec<f64> {
        self.masks
            .iter()
            .map(|&m| if m { 1.0 / self.beta_hat } else { 0.0 })
            .collect()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.masks
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Mean confidence over kept and over dropped prompts (`None` if empty).
    pub fn mean_confidence_split(&self, confidences: &[f64]) -> (Option<f64>, Option<f64>) {
        let mean = |keep: bool| {
            let v: Vec<f64> = confidences
                .iter()
                .zip(&self.masks)
                .filter(|(_, &m)| m == keep)
                .map(|(c, _)| *c)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        (mean(true), mean(false))
    }
}

/// Kept count for the top-k rule.
pub fn kept_count(batch: usize, beta: f64) -> usize {
    ((beta * batch as f64).round() as usize).clamp(1, batch)
}

/// Picks the curriculum subset of a batch.
///
/// Under [`SelectionRule::TopK`] the `k = max(1, round(β·B))` most confident
/// prompts are kept, ties going to the smaller batch index, and `τ` is the
/// confidence of the least confident kept prompt. A prompt whose confidence
/// equals `τ` may therefore be dropped when the tie rule has already filled
/// the `k` slots.
pub fn select(confidences: &[f64], beta: f64, rule: SelectionRule) -> Result<Selection> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidRetention(beta));
    }
    let b = confidences.len();
    if b == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut masks = vec![false; b];
    let (tau, kept) = match rule {
        SelectionRule::TopK => {
            let k = kept_count(b, beta);
            let order = rank_descending(confidences);
            for &i in &order[..k] {
                masks[i] = true;
            }
            (confidences[order[k - 1]], k)
        }
        SelectionRule::LiteralQuantile => {
            let mut sorted = confidences.to_vec();
            sorted.sort_by(f64::total_cmp);
            // 1-based order statistic; index 0 falls back to the minimum.
            let idx = ((1.0 - beta) * b as f64).floor() as usize;
            let tau = sorted[idx.max(1) - 1];
            let mut kept = 0;
            for (m, c) in masks.iter_mut().zip(confidences) {
                if *c >= tau {
                    *m = true;
                    kept += 1;
                }
            }
            (tau, kept)
        }
    };
    Ok(Selection {
        masks,
        tau,
        beta_hat: kept as f64 / b as f64,
        kept,
    })
}

/// Indices sorted by confidence descending, then index ascending.
fn rank_descending(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| match confidences[b].total_cmp(&confidences[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

pub fn curriculum_weight(mask: bool, beta_hat: f64) -> Result<f64> {
    if !(beta_hat > 0.0 && beta_hat <= 1.0) {
        return Err(Error::InvalidRetention(beta_hat));
    }
    Ok(if mask { 1.0 / beta_hat } else { 0.0 })
}

/// Curriculum bookkeeping for one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub step: usize,
    pub beta: f64,
    pub tau: f64,
    pub masks: Vec<bool>,
    pub beta_hat: f64,
    pub kept_count: usize,
}

impl CurriculumState {
    pub fn from_selection(step: usize, beta: f64, selection: &Selection) -> Self {
        Self {
            step,
            beta,
            tau: selection.tau,
            masks: selection.masks.clone(),
            beta_hat: selection.beta_hat,
            kept_count: selection.kept,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj_with_entropy(h: Vec<f64>) -> Trajectory {
        let n = h.len();
        Trajectory {
            prompt_id: 0,
            tokens: vec![0; n],
            behavior_logprobs: vec![0.0; n],
            per_step_entropy: h,
        }
    }

    #[test]
    fn confidence_examples() {
        let l = 3f64.ln();
        let det = vec![traj_with_entropy(vec![0.0, 0.0])];
        assert_eq!(confidence(&det, 3).unwrap(), 1.0);
        let uni = vec![traj_with_entropy(vec![l, l])];
        assert_eq!(confidence(&uni, 3).unwrap(), 0.0);
        let mixed = vec![
            traj_with_entropy(vec![0.1 * l, 0.3 * l]),
            traj_with_entropy(vec![0.6 * l]),
        ];
        assert!((confidence(&mixed, 3).unwrap() - 0.6).abs() < 1e-12);
        assert!(confidence(&det, 1).is_err());
    }

    #[test]
    fn retention_examples() {
        let s = RetentionSchedule::new(0.2, 100, 100).unwrap();
        assert_eq!(s.retention(0), 0.2);
        assert_eq!(s.retention(100), 1.0);
        assert!((s.retention(50) - 0.6).abs() < 1e-15);
        let short = RetentionSchedule::new(0.2, 100, 40).unwrap();
        assert_eq!(short.retention(70), 1.0);
        assert!(RetentionSchedule::new(0.0, 10, 10).is_err());
    }

    #[test]
    fn select_examples() {
        let c = [0.3, 0.1, 0.9, 0.5];
        let s = select(&c, 1.0, SelectionRule::TopK).unwrap();
        assert_eq!(s.masks, vec![true; 4]);
        assert_eq!((s.beta_hat, s.tau), (1.0, 0.1));

        let c: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let s = select(&c, 0.2, SelectionRule::TopK).unwrap();
        assert_eq!(s.kept_indices(), vec![8, 9]);
        assert_eq!((s.tau, s.beta_hat), (0.8, 0.2));

        let s = select(&[0.5; 5], 0.4, SelectionRule::TopK).unwrap();
        assert_eq!(s.kept_indices(), vec![0, 1]);
        assert_eq!(s.beta_hat, 0.4);
    }

    #[test]
    fn literal_quantile_keeps_one_extra() {
        let c: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let s = select(&c, 0.2, SelectionRule::LiteralQuantile).unwrap();
        assert_eq!(s.kept, 3);
        assert_eq!(s.tau, 0.7);
        let s = select(&c, 1.0, SelectionRule::LiteralQuantile).unwrap();
        assert_eq!(s.kept, 10);
    }

    #[test]
    fn small_batches_keep_one() {
        let s = select(&[0.2, 0.4], 0.2, SelectionRule::TopK).unwrap();
        assert_eq!(s.kept_indices(), vec![1]);
        assert_eq!(s.beta_hat, 0.5);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(curriculum_weight(false, 0.5).unwrap(), 0.0);
        assert_eq!(curriculum_weight(true, 0.25).unwrap(), 4.0);
        assert!(curriculum_weight(true, 0.0).is_err());
        let s = select(&[0.1, 0.2, 0.3], 1.0, SelectionRule::TopK).unwrap();
        assert_eq!(s.weights(), vec![1.0; 3]);
    }

    proptest! {
        #[test]
        fn kept_mean_dominates_batch_mean(
            c in prop::collection::vec(0.0f64..1.0, 2..40),
            beta in 0.05f64..1.0,
        ) {
            let s = select(&c, beta, SelectionRule::TopK).unwrap();
            let (kept, _) = s.mean_confidence_split(&c);
            let all = c.iter().sum::<f64>() / c.len() as f64;
            prop_assert!(kept.unwrap() >= all - 1e-12);
            let total: f64 = s.weights().iter().sum();
            prop_assert!((total - c.len() as f64).abs() < 1e-9);
        }
    }
}
