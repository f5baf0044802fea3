//! The outer training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{self, RetentionSchedule};
use crate::diagnostics::{monte_carlo_report, GradientSampler, VarianceFields, WeightConvention};
use crate::error::{Error, Result};
use crate::grpo::{inner_loop_update, TrajectoryGroup};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::eval::{evaluate_pass_at_k, EvalResult};
use crate::harness::seed;
use crate::policy::PolicyParams;
use crate::rewards::compute_rewards;
use crate::tasks::{generate_dataset, init_reference_policy_with_shortcut, Dataset};

/// One JSONL row. Row 0 is the evaluation of the initial policy; row `s`
/// for `s ≥ 1` describes outer step `s − 1` and the policy after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub mean_reward: Option<f64>,
    pub pass_at_1: Option<f64>,
    pub pass_at_8: Option<f64>,
    pub greedy_pass_at_1: Option<f64>,
    pub beta: Option<f64>,
    pub beta_hat: Option<f64>,
    pub tau: Option<f64>,
    pub mean_confidence_kept: Option<f64>,
    pub mean_confidence_dropped: Option<f64>,
    pub kept_count: Option<usize>,
    #[serde(flatten)]
    pub diagnostics: Option<VarianceFields>,
}

impl RunRow {
    fn empty(step: usize) -> Self {
        Self {
            step,
            mean_reward: None,
            pass_at_1: None,
            pass_at_8: None,
            greedy_pass_at_1: None,
            beta: None,
            beta_hat: None,
            tau: None,
            mean_confidence_kept: None,
            mean_confidence_dropped: None,
            kept_count: None,
            diagnostics: None,
        }
    }

    fn set_eval(&mut self, eval: &EvalResult) {
        self.pass_at_1 = eval.pass(1);
        self.pass_at_8 = eval.pass(8);
        self.greedy_pass_at_1 = Some(eval.greedy_pass_at_1);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub header: RunHeader,
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    /// The last row carrying an evaluation.
    pub fn final_eval(&self) -> Option<&RunRow> {
        self.rows.iter().rev().find(|r| r.greedy_pass_at_1.is_some())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Epoch-wise sampling without replacement.
struct BatchSampler {
    master: u64,
    order: Vec<usize>,
    position: usize,
    epoch: u64,
}

impl BatchSampler {
    fn new(master: u64, n: usize) -> Self {
        let mut s = Self {
            master,
            order: (0..n).collect(),
            position: 0,
            epoch: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = seed::substream(self.master, seed::BATCH, &[self.epoch]);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.position == self.order.len() {
                self.epoch += 1;
                self.position = 0;
                self.shuffle();
            }
            batch.push(self.order[self.position]);
            self.position += 1;
        }
        batch
    }
}

/// Everything a run needs besides its config.
pub struct RunSetup {
    pub dataset: Dataset,
    pub reference: PolicyParams,
    pub schedule: RetentionSchedule,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<RunSetup> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset, seed::derive_seed(cfg.dataset_seed(), seed::DATASET, &[]))?;
    let reference = init_reference_policy_with_shortcut(&dataset, &cfg.policy.sharpness, &cfg.policy.shortcut)?;
    Ok(RunSetup {
        dataset,
        reference,
        schedule: cfg.schedule()?,
    })
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            what: what.into(),
        })
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_experiment_with_policy(cfg).map(|(r, _)| r)
}

/// Runs the configured number of outer steps and returns the record and
/// the final policy.
pub fn run_experiment_with_policy(cfg: &ExperimentConfig) -> Result<(RunRecord, PolicyParams)> {
    let setup = prepare(cfg)?;
    let dataset = &setup.dataset;
    let reference = &setup.reference;
    let vocab = dataset.config.vocab_size;
    let master = cfg.seed;
    let mut theta = reference.clone();
    let mut batches = BatchSampler::new(master, dataset.len());
    let evaluate = |params: &PolicyParams, step: usize| {
        evaluate_pass_at_k(params, &dataset.prompts, cfg.eval.samples, &cfg.eval.ks, master, step)
    };

    let mut rows = Vec::with_capacity(cfg.total_steps + 1);
    let mut first = RunRow::empty(0);
    first.set_eval(&evaluate(&theta, 0)?);
    rows.push(first);

    for s in 0..cfg.total_steps {
        let theta_old = theta.clone();
        let batch = batches.next_batch(cfg.batch_size);
        let groups = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &x)| {
                let prompt = &dataset.prompts[x];
                let mut rng = seed::substream(master, seed::ROLLOUT, &[s as u64, slot as u64]);
                let trajs = (0..cfg.group_size)
                    .map(|_| theta_old.sample_trajectory(prompt.id, 1.0, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let rewards = compute_rewards(cfg.reward_mode, prompt, &trajs, vocab)?;
                TrajectoryGroup::new(prompt.clone(), trajs, rewards, cfg.surrogate.advantage_epsilon, vocab)
            })
            .collect::<Result<Vec<_>>>()?;
        let confidences: Vec<f64> = groups.iter().map(|g| g.confidence).collect();

        let (beta, selection) = match cfg.method {
            Method::NoCurriculum => {
                let all = curriculum::Selection {
                    masks: vec![true; groups.len()],
                    tau: confidences.iter().copied().fold(f64::INFINITY, f64::min),
                    beta_hat: 1.0,
                    kept: groups.len(),
                };
                (1.0, all)
            }
            Method::ViCurl => {
                let beta = setup.schedule.retention(s);
                (
                    beta,
                    curriculum::select(&confidences, beta, cfg.curriculum.selection_rule)?,
                )
            }
        };
        let weights = match cfg.method {
            Method::NoCurriculum => vec![1.0; groups.len()],
            Method::ViCurl => selection.weights(),
        };

        let mut row = RunRow::empty(s + 1);
        let mean_reward = groups.iter().map(|g| g.rewards.mean()).sum::<f64>() / groups.len() as f64;
        row.mean_reward = Some(finite(s, "mean reward", mean_reward)?);
        row.beta = Some(beta);
        row.beta_hat = Some(selection.beta_hat);
        row.tau = Some(selection.tau);
        let (kept_c, dropped_c) = selection.mean_confidence_split(&confidences);
        row.mean_confidence_kept = kept_c;
        row.mean_confidence_dropped = dropped_c;
        row.kept_count = Some(selection.kept);

        if cfg.diagnostics.every > 0 && s % cfg.diagnostics.every == 0 {
            let sampler = GradientSampler {
                theta: &theta_old,
                theta_old: &theta_old,
                reference,
                cfg: &cfg.surrogate,
                reward_mode: cfg.reward_mode,
                group_size: cfg.group_size,
            };
            let prompts: Vec<_> = batch.iter().map(|&x| dataset.prompts[x].clone()).collect();
            let report = monte_carlo_report(
                &sampler,
                &prompts,
                &selection.masks,
                WeightConvention::Empirical,
                cfg.diagnostics.repeats,
                cfg.diagnostics.direct_samples,
                seed::derive_seed(master, seed::DIAGNOSTICS, &[s as u64]),
            )?;
            row.diagnostics = Some(report.fields());
        }

        let mut rng = seed::substream(master, seed::MINIBATCH, &[s as u64]);
        let outcome = inner_loop_update(
            &theta,
            reference,
            &groups,
            &weights,
            &cfg.surrogate,
            &cfg.optimizer,
            &mut rng,
        )?;
        if !outcome.params.is_finite() {
            return Err(Error::NonFinite {
                step: s,
                what: "policy logits".into(),
            });
        }
        theta = outcome.params;

        let last = s + 1 == cfg.total_steps;
        if last || (cfg.eval.every > 0 && (s + 1) % cfg.eval.every == 0) {
            row.set_eval(&evaluate(&theta, s + 1)?);
        }
        rows.push(row);
    }

    let record = RunRecord {
        header: RunHeader {
            config_hash: cfg.hash(),
            config: cfg.clone(),
        },
        rows,
    };
    Ok((record, theta))
}
