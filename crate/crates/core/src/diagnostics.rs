//! Monte-Carlo variance components of the curriculum gradient estimator and
//! numerical checks of its bounds.
//!
//! For a prompt set with curriculum mask `w` and retention `β` (the kept
//! fraction of the set), the estimator `ĝ = (w(x)/β)·g(x, y_{1:G})` with `x`
//! uniform and `y_{1:G}` drawn from the behaviour policy satisfies
//!
//! ```text
//! Var(ĝ) = σ²_g/β + V_prob/β + (1-β)/β · ‖∇L_t‖²
//! ```
//!
//! where `σ²_g` is the mean within-prompt variance of `g` over kept prompts
//! and `V_prob` the spread of per-prompt mean gradients over kept prompts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{self, SelectionRule};
use crate::error::{Error, Result};
use crate::grpo::{self, SurrogateConfig, TrajectoryGroup};
use crate::harness::seed;
use crate::numeric::{GradientVector, NeumaierSum, VectorAccumulator};
use crate::policy::PolicyParams;
use crate::rewards::{compute_rewards, normalized_entropy, RewardMode};
use crate::tasks::Prompt;

/// Floor for denominators of relative residuals.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// `kept / full`, exactly 1 when the two agree (including both zero).
pub fn ratio(kept: f64, full: f64) -> f64 {
    if kept == full {
        1.0
    } else {
        kept / full.max(VARIANCE_FLOOR)
    }
}

/// Which retention the estimator weight divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightConvention {
    /// Kept probability mass under the prompt distribution.
    Population,
    /// Kept fraction of the current batch.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub prompts_kept: usize,
    pub prompts_full: usize,
    /// Group draws per prompt `K`; 0 for exact computations.
    pub repeats_per_prompt: usize,
    /// Independent draws of `ĝ` behind `total_direct`; 0 for exact.
    pub direct_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub beta: f64,
    pub weight_convention: WeightConvention,
    /// Action variance over kept prompts, then over all prompts.
    pub sigma_g2: f64,
    pub sigma_g2_full: f64,
    /// Problem variance (finite-`K` corrected) over kept, then all prompts.
    pub v_prob: f64,
    pub v_prob_full: f64,
    /// Uncorrected problem variances.
    pub v_prob_raw: f64,
    pub v_prob_full_raw: f64,
    pub grad_norm_sq: f64,
    pub masking: f64,
    pub total_decomposed: f64,
    /// `None` when no direct draws were requested.
    pub total_direct: Option<f64>,
    pub ratio_sigma: f64,
    pub ratio_vprob: f64,
    /// Largest kept-set `‖g‖` seen.
    pub g_conf_tau: f64,
    /// Largest `|ℓ|` seen over all prompts.
    pub l_max: f64,
    /// `2·l_max·(1-β) − |L − L_t|`
    pub bound_thm1_slack: f64,
    /// `G_conf²/β − ‖∇L_t‖² − Var(ĝ)`
    pub bound_lemma1_slack: f64,
    pub sample_counts: SampleCounts,
}

/// Variance fields shared by diagnostics records and run rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFields {
    pub sigma_g2_kept: f64,
    pub sigma_g2_full: f64,
    pub vprob_kept: f64,
    pub vprob_full: f64,
    pub masking: f64,
    pub total_decomposed: f64,
    pub total_direct: Option<f64>,
    pub ratio_sigma: f64,
    pub ratio_vprob: f64,
    pub bound_thm1_slack: f64,
    pub bound_lemma1_slack: f64,
}

/// One JSONL diagnostics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub beta: f64,
    pub beta_hat: f64,
    pub tau: f64,
    #[serde(flatten)]
    pub fields: VarianceFields,
}

impl VarianceReport {
    pub fn fields(&self) -> VarianceFields {
        VarianceFields {
            sigma_g2_kept: self.sigma_g2,
            sigma_g2_full: self.sigma_g2_full,
            vprob_kept: self.v_prob,
            vprob_full: self.v_prob_full,
            masking: self.masking,
            total_decomposed: self.total_decomposed,
            total_direct: self.total_direct,
            ratio_sigma: self.ratio_sigma,
            ratio_vprob: self.ratio_vprob,
            bound_thm1_slack: self.bound_thm1_slack,
            bound_lemma1_slack: self.bound_lemma1_slack,
        }
    }

    /// `beta` is the schedule's target; the report's own `beta` is the
    /// kept fraction actually used in the weight.
    pub fn to_record(&self, step: usize, beta: f64, tau: f64) -> DiagnosticRecord {
        DiagnosticRecord {
            step,
            beta,
            beta_hat: self.beta,
            tau,
            fields: self.fields(),
        }
    }
}

/// Constants of the bound assumptions as measured on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub g_conf_of_tau: f64,
    pub a1: f64,
    pub a2: f64,
    pub alpha: f64,
    pub l_max: f64,
}

/// Population estimate of `E‖Z − EZ‖²`.
pub fn vector_variance(samples: &[GradientVector]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].dim();
    for s in samples {
        s.check_dim(dim)?;
    }
    let mut acc = VectorAccumulator::new(dim);
    for s in samples {
        acc.add_scaled(s, 1.0 / samples.len() as f64);
    }
    let mean = acc.finish();
    let mut total = NeumaierSum::default();
    for s in samples {
        total.add(s.dist_sq(&mean));
    }
    Ok(total.value() / samples.len() as f64)
}

pub fn masking_variance(beta: f64, grad_norm_sq: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidRetention(beta));
    }
    Ok((1.0 - beta) / beta * grad_norm_sq)
}

/// Streaming mean and summed squared deviation of vectors (Welford/Chan).
#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: f64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: 0.0,
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let mut m2 = 0.0;
        for (m, &v) in self.mean.iter_mut().zip(x) {
            let delta = v - *m;
            *m += delta / n;
            m2 += delta * (v - *m);
        }
        self.m2 += m2;
    }

    fn add_zero(&mut self) {
        self.count += 1;
        let n = self.count as f64;
        let mut m2 = 0.0;
        for m in self.mean.iter_mut() {
            let delta = -*m;
            *m += delta / n;
            m2 += delta * (-*m);
        }
        self.m2 += m2;
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut cross = 0.0;
        for (m, o) in self.mean.iter_mut().zip(&other.mean) {
            let delta = o - *m;
            cross += delta * delta;
            *m += delta * nb / n;
        }
        self.m2 += other.m2 + cross * na * nb / n;
        self.count += other.count;
    }

    fn population_variance(&self) -> f64 {
        self.m2 / self.count as f64
    }

    fn unbiased_variance(&self) -> f64 {
        self.m2 / (self.count as f64 - 1.0)
    }
}

/// Draws rollout groups for a prompt and returns their surrogate gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradientSampler<'a> {
    pub theta: &'a PolicyParams,
    pub theta_old: &'a PolicyParams,
    pub reference: &'a PolicyParams,
    pub cfg: &'a SurrogateConfig,
    pub reward_mode: RewardMode,
    pub group_size: usize,
}

impl GradientSampler<'_> {
    pub fn sample_group<R: rand::Rng + ?Sized>(&self, prompt: &Prompt, rng: &mut R) -> Result<TrajectoryGroup> {
        let trajectories = (0..self.group_size)
            .map(|_| self.theta_old.sample_trajectory(prompt.id, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let v = self.theta_old.vocab_size();
        let rewards = compute_rewards(self.reward_mode, prompt, &trajectories, v)?;
        TrajectoryGroup::new(prompt.clone(), trajectories, rewards, self.cfg.advantage_epsilon, v)
    }

    pub fn group_gradient<R: rand::Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        rng: &mut R,
    ) -> Result<(grpo::SurrogateEval, GradientVector)> {
        let group = self.sample_group(prompt, rng)?;
        grpo::surrogate_value_and_gradient(self.theta, self.reference, &group, self.cfg)
    }
}

/// `K` group draws for one prompt, summarised.
#[derive(Debug, Clone)]
pub struct PromptSamples {
    pub prompt_id: usize,
    pub repeats: usize,
    /// `ḡ(x)`: mean of the `K` group gradients.
    pub mean: GradientVector,
    /// Bessel-corrected within-prompt variance of `g`.
    pub within_variance: f64,
    /// Monte-Carlo confidence from all `K·G` rollouts.
    pub confidence: f64,
    pub mean_loss: f64,
    pub max_abs_loss: f64,
    pub max_grad_norm: f64,
}

/// Draws `repeats` groups for every prompt, each prompt on its own
/// substream of `seed_value`.
pub fn collect_prompt_samples(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    repeats: usize,
    seed_value: u64,
) -> Result<Vec<PromptSamples>> {
    if repeats < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: repeats,
        });
    }
    if prompts.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let log_v = (sampler.theta_old.vocab_size() as f64).ln();
    prompts
        .par_iter()
        .map(|prompt| {
            let mut rng = seed::substream(seed_value, seed::DIAGNOSTICS, &[prompt.id as u64]);
            let mut moments = Moments::new(sampler.theta.dim());
            let mut entropy = NeumaierSum::default();
            let mut loss = NeumaierSum::default();
            let mut max_abs_loss: f64 = 0.0;
            let mut max_grad_norm: f64 = 0.0;
            for _ in 0..repeats {
                let group = sampler.sample_group(prompt, &mut rng)?;
                for y in &group.trajectories {
                    entropy.add(normalized_entropy(y, log_v));
                }
                let (eval, g) =
                    grpo::surrogate_value_and_gradient(sampler.theta, sampler.reference, &group, sampler.cfg)?;
                loss.add(eval.loss);
                max_abs_loss = max_abs_loss.max(eval.loss.abs());
                max_grad_norm = max_grad_norm.max(g.norm());
                moments.add(g.as_slice());
            }
            let rollouts = (repeats * sampler.group_size) as f64;
            Ok(PromptSamples {
                prompt_id: prompt.id,
                repeats,
                within_variance: moments.unbiased_variance(),
                mean: GradientVector::from_vec(moments.mean),
                confidence: (1.0 - entropy.value() / rollouts).clamp(0.0, 1.0),
                mean_loss: loss.value() / repeats as f64,
                max_abs_loss,
                max_grad_norm,
            })
        })
        .collect()
}

pub fn action_variance(samples: &[&PromptSamples]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(samples.iter().map(|s| s.within_variance).sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemVariance {
    pub raw: f64,
    /// Expected inflation of `raw` from estimating each `ḡ` with `K` draws.
    pub correction: f64,
    /// `max(raw − correction, 0)`
    pub corrected: f64,
}

/// Spread of the `K`-averaged per-prompt gradients.
///
/// With `n` prompts, `E[raw] = V_prob + (1 − 1/n)·mean_x σ²_x / K`, so the
/// correction subtracts that term with `σ²_x` replaced by its unbiased
/// estimate.
pub fn problem_variance(samples: &[&PromptSamples]) -> Result<ProblemVariance> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let means: Vec<GradientVector> = samples.iter().map(|s| s.mean.clone()).collect();
    let raw = vector_variance(&means)?;
    let n = samples.len() as f64;
    let correction = (1.0 - 1.0 / n)
        * samples
            .iter()
            .map(|s| s.within_variance / s.repeats as f64)
            .sum::<f64>()
        / n;
    Ok(ProblemVariance {
        raw,
        correction,
        corrected: (raw - correction).max(0.0),
    })
}

pub fn estimate_action_variance(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    repeats: usize,
    seed_value: u64,
) -> Result<f64> {
    let samples = collect_prompt_samples(sampler, prompts, repeats, seed_value)?;
    action_variance(&samples.iter().collect::<Vec<_>>())
}

pub fn estimate_problem_variance(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    repeats: usize,
    seed_value: u64,
) -> Result<ProblemVariance> {
    if prompts.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: prompts.len(),
        });
    }
    let samples = collect_prompt_samples(sampler, prompts, repeats, seed_value)?;
    problem_variance(&samples.iter().collect::<Vec<_>>())
}

/// `E‖ĝ − Eĝ‖²` from `draws` independent `(x, y_{1:G})` samples, `x`
/// uniform over `prompts`, dropped prompts contributing `ĝ = 0`.
pub fn direct_variance(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    masks: &[bool],
    beta: f64,
    draws: usize,
    seed_value: u64,
) -> Result<f64> {
    use rand::Rng;
    const CHUNK: usize = 512;
    if masks.len() != prompts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} prompts",
            masks.len(),
            prompts.len()
        )));
    }
    if draws < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: draws });
    }
    let chunks = draws.div_ceil(CHUNK);
    let partial = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::substream(seed_value, "direct", &[c as u64]);
            let mut m = Moments::new(sampler.theta.dim());
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                let x = rng.random_range(0..prompts.len());
                if masks[x] {
                    let (_, mut g) = sampler.group_gradient(&prompts[x], &mut rng)?;
                    g.scale(1.0 / beta);
                    m.add(g.as_slice());
                } else {
                    m.add_zero();
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Moments::new(sampler.theta.dim());
    for m in &partial {
        total.merge(m);
    }
    Ok(total.population_variance())
}

/// Assembles a report from per-prompt samples and a mask over them.
///
/// `β` is the kept fraction of the sample set. `‖∇L_t‖²` is estimated from
/// the kept `ḡ` with the same finite-`K` correction as the problem variance.
pub fn report_from_samples(
    samples: &[PromptSamples],
    masks: &[bool],
    convention: WeightConvention,
    direct: Option<f64>,
    direct_samples: usize,
) -> Result<VarianceReport> {
    if masks.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} prompts",
            masks.len(),
            samples.len()
        )));
    }
    let all: Vec<&PromptSamples> = samples.iter().collect();
    let kept: Vec<&PromptSamples> = samples.iter().zip(masks).filter_map(|(s, &m)| m.then_some(s)).collect();
    if kept.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = samples.len() as f64;
    let nk = kept.len() as f64;
    let beta = nk / n;

    let sigma_kept = action_variance(&kept)?;
    let sigma_full = action_variance(&all)?;
    let single = ProblemVariance {
        raw: 0.0,
        correction: 0.0,
        corrected: 0.0,
    };
    let vp_kept = if kept.len() >= 2 {
        problem_variance(&kept)?
    } else {
        single
    };
    let vp_full = if all.len() >= 2 {
        problem_variance(&all)?
    } else {
        single
    };

    let mut acc = VectorAccumulator::new(kept[0].mean.dim());
    for s in &kept {
        acc.add_scaled(&s.mean, 1.0 / nk);
    }
    let grad = acc.finish();
    let noise = kept.iter().map(|s| s.within_variance / s.repeats as f64).sum::<f64>() / (nk * nk);
    let grad_norm_sq = (grad.norm_sq() - noise).max(0.0);
    let masking = masking_variance(beta, grad_norm_sq)?;
    let total_decomposed = sigma_kept / beta + vp_kept.corrected / beta + masking;

    let l_full = samples.iter().map(|s| s.mean_loss).sum::<f64>() / n;
    let l_kept = kept.iter().map(|s| s.mean_loss).sum::<f64>() / nk;
    let l_max = samples.iter().fold(0.0f64, |m, s| m.max(s.max_abs_loss));
    let g_conf_tau = kept.iter().fold(0.0f64, |m, s| m.max(s.max_grad_norm));
    let total = direct.unwrap_or(total_decomposed);

    Ok(VarianceReport {
        beta,
        weight_convention: convention,
        sigma_g2: sigma_kept,
        sigma_g2_full: sigma_full,
        v_prob: vp_kept.corrected,
        v_prob_full: vp_full.corrected,
        v_prob_raw: vp_kept.raw,
        v_prob_full_raw: vp_full.raw,
        grad_norm_sq,
        masking,
        total_decomposed,
        total_direct: direct,
        ratio_sigma: ratio(sigma_kept, sigma_full),
        ratio_vprob: ratio(vp_kept.corrected, vp_full.corrected),
        g_conf_tau,
        l_max,
        bound_thm1_slack: check_consistency_bound(l_full, l_kept, beta, l_max).value,
        bound_lemma1_slack: check_confidence_bound(total, g_conf_tau, beta, grad_norm_sq).value,
        sample_counts: SampleCounts {
            prompts_kept: kept.len(),
            prompts_full: samples.len(),
            repeats_per_prompt: samples[0].repeats,
            direct_samples,
        },
    })
}

/// Full Monte-Carlo report for one mask. `direct_draws = 0` skips the
/// direct estimate.
pub fn monte_carlo_report(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    masks: &[bool],
    convention: WeightConvention,
    repeats: usize,
    direct_draws: usize,
    seed_value: u64,
) -> Result<VarianceReport> {
    let samples = collect_prompt_samples(sampler, prompts, repeats, seed_value)?;
    let kept = masks.iter().filter(|m| **m).count();
    let direct = if direct_draws > 0 {
        let beta = kept as f64 / prompts.len() as f64;
        Some(direct_variance(
            sampler,
            prompts,
            masks,
            beta,
            direct_draws,
            seed::derive_seed(seed_value, "direct", &[]),
        )?)
    } else {
        None
    };
    report_from_samples(&samples, masks, convention, direct, direct_draws)
}

/// One point of a retention sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta_target: f64,
    pub tau: f64,
    pub report: VarianceReport,
}

/// Reports at each retention in `betas`, all sharing one set of per-prompt
/// draws; masks come from top-k selection on the sampled confidences.
pub fn variance_sweep(
    sampler: &GradientSampler<'_>,
    prompts: &[Prompt],
    betas: &[f64],
    repeats: usize,
    seed_value: u64,
) -> Result<Vec<SweepPoint>> {
    let samples = collect_prompt_samples(sampler, prompts, repeats, seed_value)?;
    let confidences: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    betas
        .iter()
        .map(|&b| {
            let sel = curriculum::select(&confidences, b, SelectionRule::TopK)?;
            let report = report_from_samples(&samples, &sel.masks, WeightConvention::Population, None, 0)?;
            Ok(SweepPoint {
                beta_target: b,
                tau: sel.tau,
                report,
            })
        })
        .collect()
}

/// Outcome of a numerical check: residual for equalities, slack for bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub passed: bool,
    pub value: f64,
}

/// Relative gap between the three-term sum and the direct variance.
pub fn check_decomposition(report: &VarianceReport, tolerance: f64) -> BoundCheck {
    match report.total_direct {
        Some(direct) => {
            let residual = (report.total_decomposed - direct).abs() / direct.max(VARIANCE_FLOOR);
            BoundCheck {
                passed: residual <= tolerance,
                value: residual,
            }
        }
        None => BoundCheck {
            passed: false,
            value: f64::INFINITY,
        },
    }
}

/// `|L − L_t| ≤ 2·l_max·(1−β)`; the value is the slack.
pub fn check_consistency_bound(full: f64, curriculum: f64, beta: f64, l_max: f64) -> BoundCheck {
    let slack = 2.0 * l_max * (1.0 - beta) - (full - curriculum).abs();
    BoundCheck {
        passed: slack >= 0.0,
        value: slack,
    }
}

/// `Var(ĝ) ≤ G_conf²/β − ‖∇L_t‖²`; the value is the slack.
pub fn check_confidence_bound(var_total: f64, g_conf_tau: f64, beta: f64, grad_norm_sq: f64) -> BoundCheck {
    let slack = g_conf_tau * g_conf_tau / beta - grad_norm_sq - var_total;
    BoundCheck {
        passed: slack >= 0.0,
        value: slack,
    }
}

/// `G_conf(τ)` for each threshold: the largest norm among prompts with
/// confidence at least `τ` (0 for an empty set). Non-increasing in `τ`.
pub fn confidence_envelope(confidences: &[f64], norms: &[f64], taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .map(|&tau| {
            confidences
                .iter()
                .zip(norms)
                .filter(|(c, _)| **c >= tau)
                .fold(0.0f64, |m, (_, n)| m.max(*n))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Least-squares slopes of `log σ²` and `log V_prob` against `log β`.
    pub slope_sigma: Option<f64>,
    pub slope_vprob: Option<f64>,
    /// `min(slopes) − 1` when positive.
    pub alpha: Option<f64>,
    /// Smallest constants with `σ² ≤ a1·β^{1+α}` and `V_prob ≤ a2·β^{1+α}`.
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub violation: Option<String>,
}

fn log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(b, y)| *b > 0.0 && *y > 0.0)
        .map(|(b, y)| (b.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn envelope(points: &[(f64, f64)], exponent: f64) -> f64 {
    points
        .iter()
        .filter(|(b, _)| *b > 0.0)
        .fold(0.0f64, |m, (b, y)| m.max(y / b.powf(exponent)))
}

/// Fits `σ², V_prob ∝ β^{1+α}` on a `(β, σ², V_prob)` series.
pub fn fit_decay_exponent(series: &[(f64, f64, f64)]) -> Result<DecayFit> {
    let mut distinct: Vec<f64> = series.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: distinct.len(),
        });
    }
    let sigma: Vec<(f64, f64)> = series.iter().map(|p| (p.0, p.1)).collect();
    let vprob: Vec<(f64, f64)> = series.iter().map(|p| (p.0, p.2)).collect();
    let slope_sigma = log_slope(&sigma);
    let slope_vprob = log_slope(&vprob);
    let slope = match (slope_sigma, slope_vprob) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let mut fit = DecayFit {
        slope_sigma,
        slope_vprob,
        alpha: None,
        a1: None,
        a2: None,
        violation: None,
    };
    match slope {
        Some(s) if s - 1.0 > 0.0 => {
            let alpha = s - 1.0;
            fit.alpha = Some(alpha);
            fit.a1 = Some(envelope(&sigma, 1.0 + alpha));
            fit.a2 = Some(envelope(&vprob, 1.0 + alpha));
        }
        Some(s) => {
            fit.violation = Some(format!("fitted log-log slope {s:.4} gives no positive exponent"));
        }
        None => {
            fit.violation = Some("no usable positive points to fit".into());
        }
    }
    Ok(fit)
}

impl BoundParams {
    pub fn from_fit(fit: &DecayFit, g_conf_of_tau: f64, l_max: f64) -> Option<Self> {
        Some(Self {
            g_conf_of_tau,
            a1: fit.a1?,
            a2: fit.a2?,
            alpha: fit.alpha?,
            l_max,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::from_vec(v.to_vec())
    }

    #[test]
    fn vector_variance_examples() {
        assert_eq!(vector_variance(&[gv(&[1.0, 2.0]), gv(&[1.0, 2.0])]).unwrap(), 0.0);
        assert!((vector_variance(&[gv(&[1.0, 0.0]), gv(&[-1.0, 0.0])]).unwrap() - 1.0).abs() < 1e-15);
        let a = [gv(&[0.3, -1.0]), gv(&[2.0, 0.5]), gv(&[-0.7, 0.1])];
        let shifted: Vec<_> = a.iter().map(|v| gv(&[v[0] + 10.0, v[1] - 3.0])).collect();
        let (x, y) = (vector_variance(&a).unwrap(), vector_variance(&shifted).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!(vector_variance(&a[..1]).is_err());
        assert!(vector_variance(&[gv(&[1.0]), gv(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn masking_examples() {
        assert_eq!(masking_variance(1.0, 3.0).unwrap(), 0.0);
        assert_eq!(masking_variance(0.5, 2.0).unwrap(), 2.0);
        assert_eq!(masking_variance(0.1, 0.0).unwrap(), 0.0);
        assert!(masking_variance(0.0, 1.0).is_err());
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<Vec<f64>> = (0..37)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos() * 5.0])
            .collect();
        let mut single = Moments::new(2);
        for x in &xs {
            single.add(x);
        }
        let mut merged = Moments::new(2);
        for chunk in xs.chunks(10) {
            let mut part = Moments::new(2);
            for x in chunk {
                part.add(x);
            }
            merged.merge(&part);
        }
        assert!((single.m2 - merged.m2).abs() < 1e-12);
        let samples: Vec<_> = xs.iter().map(|x| gv(x)).collect();
        assert!((single.population_variance() - vector_variance(&samples).unwrap()).abs() < 1e-12);
        let mut z = Moments::new(2);
        z.add(&[1.0, 1.0]);
        z.add_zero();
        assert!((z.population_variance() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bound_checks_report_slack() {
        let c = check_consistency_bound(1.0, 1.0, 1.0, 5.0);
        assert!(c.passed && c.value == 0.0);
        let c = check_consistency_bound(1.0, 2.0, 0.9, 1.0);
        assert!(!c.passed);
        let c = check_confidence_bound(0.0, 0.0, 0.5, 0.0);
        assert!(c.passed && c.value == 0.0);
    }

    #[test]
    fn envelope_is_non_increasing() {
        let c = [0.1, 0.5, 0.9, 0.7];
        let norms = [3.0, 1.0, 0.5, 2.0];
        let g = confidence_envelope(&c, &norms, &[0.0, 0.3, 0.6, 0.8, 0.95]);
        assert_eq!(g, vec![3.0, 2.0, 2.0, 0.5, 0.0]);
    }

    #[test]
    fn decay_fit_examples() {
        let power: Vec<_> = [0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&b| (b, 3.0 * b * b, 0.5 * b * b))
            .collect();
        let fit = fit_decay_exponent(&power).unwrap();
        assert!((fit.alpha.unwrap() - 1.0).abs() < 1e-12);
        assert!((fit.a1.unwrap() - 3.0).abs() < 1e-12);
        assert!((fit.a2.unwrap() - 0.5).abs() < 1e-12);
        let params = BoundParams::from_fit(&fit, 1.0, 2.0).unwrap();
        assert_eq!(params.l_max, 2.0);

        let flat: Vec<_> = [0.2, 0.5, 1.0].iter().map(|&b| (b, 1.0, 1.0)).collect();
        let fit = fit_decay_exponent(&flat).unwrap();
        assert!(fit.alpha.is_none() && fit.violation.is_some());
        assert!(BoundParams::from_fit(&fit, 1.0, 1.0).is_none());

        assert!(fit_decay_exponent(&[(0.5, 1.0, 1.0), (0.5, 2.0, 2.0), (1.0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn ratio_is_one_on_equal_inputs() {
        assert_eq!(ratio(0.0, 0.0), 1.0);
        assert_eq!(ratio(0.37, 0.37), 1.0);
        assert_eq!(ratio(1.0, 2.0), 0.5);
    }
}
