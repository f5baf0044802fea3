//! Exact expectations by brute-force enumeration.
//!
//! Every trajectory of length `T` and every ordered group of `G` of them
//! (with repetition, i.e. i.i.d. sampling) is enumerated for each prompt;
//! prompts are weighted uniformly. The oracle carries its own implementation
//! of the per-prompt surrogate, generic over [`Scalar`], and differentiates it
//! in forward mode with [`Dual`] numbers. That route shares no code with the
//! analytic gradient in [`crate::grpo`], which the oracle uses only where it
//! is the thing being checked: the estimator `ĝ_t`.

pub mod matrix;
pub mod scalar;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{self, SelectionRule};
use crate::diagnostics::{ratio, SampleCounts, VarianceReport, WeightConvention};
use crate::error::{Error, Result};
use crate::grpo::{self, SurrogateConfig, TrajectoryGroup};
use crate::numeric::{GradientVector, NeumaierSum, VectorAccumulator};
use crate::policy::{PolicyParams, Token, Trajectory};
use crate::rewards::{compute_rewards, RewardMode};
use crate::tasks::{generate_dataset, Dataset, Prompt, TaskConfig};

pub use scalar::{Dual, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_tuples: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_tuples: 1_000_000 }
    }
}

/// Log-softmax over a generic scalar, shifted by the largest value.
fn log_softmax_generic<S: Scalar>(z: &[S]) -> Vec<S> {
    let max = z.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let shift = S::constant(max);
    let mut total = S::constant(0.0);
    for &v in z {
        total = total + (v - shift).exp();
    }
    let lse = shift + total.ln();
    z.iter().map(|&v| v - lse).collect()
}

/// Local index of a context inside one prompt's block.
fn local_context(position: usize, previous: Option<Token>, vocab_size: usize) -> usize {
    match previous {
        None => 0,
        Some(prev) => 1 + (position - 1) * vocab_size + prev,
    }
}

fn prompt_block(params: &PolicyParams, prompt: usize) -> &[f64] {
    let len = params.shape().contexts_per_prompt() * params.vocab_size();
    &params.as_slice()[prompt * len..(prompt + 1) * len]
}

/// All `|V|^T` trajectories of one prompt with their exact probabilities.
/// Log-probabilities and entropies are recomputed here rather than taken
/// from [`PolicyParams`].
pub fn enumerate_trajectories(
    params: &PolicyParams,
    prompt_id: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<(Trajectory, f64)>> {
    let v = params.vocab_size();
    let t_max = params.max_len();
    let count = checked_pow(v as u128, t_max as u32);
    if count.is_none_or(|c| c > budget.max_tuples) {
        return Err(Error::BudgetExceeded {
            required: count.unwrap_or(u128::MAX),
            budget: budget.max_tuples,
        });
    }
    params.context_index(&crate::policy::ContextKey::start(prompt_id))?;
    let block = prompt_block(params, prompt_id);
    let count = count.unwrap() as usize;
    let mut out = Vec::with_capacity(count);
    for code in 0..count {
        let mut tokens = vec![0; t_max];
        let mut rest = code;
        for slot in tokens.iter_mut().rev() {
            *slot = rest % v;
            rest /= v;
        }
        let mut logprobs = Vec::with_capacity(t_max);
        let mut entropies = Vec::with_capacity(t_max);
        let mut log_total = 0.0;
        for (t, &a) in tokens.iter().enumerate() {
            let prev = (t > 0).then(|| tokens[t - 1]);
            let off = local_context(t, prev, v) * v;
            let lp = log_softmax_generic(&block[off..off + v]);
            let h: f64 = lp.iter().map(|l| if l.exp() > 0.0 { -l.exp() * l } else { 0.0 }).sum();
            logprobs.push(lp[a]);
            entropies.push(h.max(0.0));
            log_total += lp[a];
        }
        out.push((
            Trajectory {
                prompt_id,
                tokens,
                behavior_logprobs: logprobs,
                per_step_entropy: entropies,
            },
            log_total.exp(),
        ));
    }
    Ok(out)
}

fn checked_pow(base: u128, exp: u32) -> Option<u128> {
    base.checked_pow(exp)
}

/// Exact `c(x) = 1 - E_y[(1/T) Σ_t H_t / log|V|]` under `params`.
pub fn exact_confidence(params: &PolicyParams, prompt_id: usize, budget: &EnumerationBudget) -> Result<f64> {
    let log_v = (params.vocab_size() as f64).ln();
    let mut u = NeumaierSum::default();
    for (y, p) in enumerate_trajectories(params, prompt_id, budget)? {
        let mean_h = y.per_step_entropy.iter().sum::<f64>() / y.len() as f64;
        u.add(p * mean_h / log_v);
    }
    Ok((1.0 - u.value()).clamp(0.0, 1.0))
}

/// A fully specified enumerable problem.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub dataset: Dataset,
    pub theta: PolicyParams,
    pub theta_old: PolicyParams,
    pub reference: PolicyParams,
    pub cfg: SurrogateConfig,
    pub reward_mode: RewardMode,
    pub group_size: usize,
    pub budget: EnumerationBudget,
}

/// Size and randomisation of a generated [`OracleInstance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub group_size: usize,
    pub reward_mode: RewardMode,
    /// Behaviour logits are uniform in `[-logit_scale, logit_scale]`.
    pub logit_scale: f64,
    /// `θ - θ_old` is uniform in `[-perturbation, perturbation]`.
    pub perturbation: f64,
    pub cfg: SurrogateConfig,
}

impl InstanceSpec {
    pub fn new(vocab_size: usize, max_len: usize, num_prompts: usize) -> Self {
        Self {
            vocab_size,
            max_len,
            num_prompts,
            group_size: 2,
            reward_mode: RewardMode::Oracle,
            logit_scale: 1.0,
            perturbation: 0.1,
            cfg: SurrogateConfig {
                kl_coefficient: 0.05,
                ..Default::default()
            },
        }
    }
}

impl OracleInstance {
    pub fn random(spec: &InstanceSpec, seed: u64) -> Result<Self> {
        let task = TaskConfig {
            vocab_size: spec.vocab_size,
            answer_alphabet: spec.vocab_size,
            answer_len: 1,
            context_len: 1,
            max_len: spec.max_len,
            counts: vec![spec.num_prompts],
        };
        let dataset = generate_dataset(&task, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a1c_1e00);
        let shape = dataset.policy_shape();
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..shape.param_count())
                .map(|_| {
                    if scale > 0.0 {
                        rng.random_range(-scale..scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let old = draw(spec.logit_scale);
        let reference: Vec<f64> = old.iter().zip(draw(0.5)).map(|(a, b)| a + b).collect();
        let theta: Vec<f64> = old.iter().zip(draw(spec.perturbation)).map(|(a, b)| a + b).collect();
        Ok(Self {
            theta: PolicyParams::from_logits(shape, theta)?,
            theta_old: PolicyParams::from_logits(shape, old)?,
            reference: PolicyParams::from_logits(shape, reference)?,
            dataset,
            cfg: spec.cfg,
            reward_mode: spec.reward_mode,
            group_size: spec.group_size,
            budget: EnumerationBudget::default(),
        })
    }

    pub fn with_theta(&self, theta: PolicyParams) -> Self {
        Self { theta, ..self.clone() }
    }

    fn check_budget(&self) -> Result<()> {
        let per_prompt = (self.theta.vocab_size() as u128).checked_pow((self.theta.max_len() * self.group_size) as u32);
        let required = per_prompt.and_then(|p| p.checked_mul(self.dataset.len() as u128));
        match required {
            Some(r) if r <= self.budget.max_tuples => Ok(()),
            r => Err(Error::BudgetExceeded {
                required: r.unwrap_or(u128::MAX),
                budget: self.budget.max_tuples,
            }),
        }
    }

    /// Exact confidences under the behaviour policy and the resulting
    /// curriculum mask for a target retention.
    pub fn curriculum_mask(&self, beta_target: f64) -> Result<(Vec<f64>, Vec<bool>, f64)> {
        let confidences = (0..self.dataset.len())
            .map(|x| exact_confidence(&self.theta_old, x, &self.budget))
            .collect::<Result<Vec<_>>>()?;
        let sel = curriculum::select(&confidences, beta_target, SelectionRule::TopK)?;
        let beta = sel.kept as f64 / self.dataset.len() as f64;
        Ok((confidences, sel.masks, beta))
    }
}

/// Iterates every ordered `G`-tuple of one prompt's trajectories.
pub struct TupleEnumeration<'a> {
    trajectories: &'a [(Trajectory, f64)],
    group_size: usize,
    next: usize,
    total: usize,
}

impl<'a> TupleEnumeration<'a> {
    pub fn new(trajectories: &'a [(Trajectory, f64)], group_size: usize) -> Self {
        Self {
            trajectories,
            group_size,
            next: 0,
            total: trajectories.len().pow(group_size as u32),
        }
    }
}

impl Iterator for TupleEnumeration<'_> {
    /// Indices into the trajectory list and the tuple's probability.
    type Item = (Vec<usize>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let m = self.trajectories.len();
        let mut rest = self.next;
        let mut idx = vec![0; self.group_size];
        for slot in idx.iter_mut().rev() {
            *slot = rest % m;
            rest /= m;
        }
        self.next += 1;
        let p = idx.iter().map(|&i| self.trajectories[i].1).product();
        Some((idx, p))
    }
}

/// Advantages recomputed independently of [`grpo::compute_advantages`].
fn oracle_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    rewards.iter().map(|r| (r - mean) / (var.sqrt() + epsilon)).collect()
}

/// The per-prompt surrogate written out directly from its definition.
/// `theta_block` and `ref_block` are one prompt's logits in storage order.
pub fn oracle_surrogate<S: Scalar>(
    theta_block: &[S],
    ref_block: &[f64],
    vocab_size: usize,
    group: &[&Trajectory],
    advantages: &[f64],
    cfg: &SurrogateConfig,
) -> S {
    let v = vocab_size;
    let lo = 1.0 - cfg.clip_epsilon;
    let hi = 1.0 + cfg.clip_epsilon;
    let mut total = S::constant(0.0);
    for (y, &adv) in group.iter().zip(advantages) {
        let a_s = S::constant(adv);
        let mut per_traj = S::constant(0.0);
        for (t, &a) in y.tokens.iter().enumerate() {
            let prev = (t > 0).then(|| y.tokens[t - 1]);
            let off = local_context(t, prev, v) * v;
            let lp = log_softmax_generic(&theta_block[off..off + v]);
            let ref_logits: Vec<f64> = ref_block[off..off + v].to_vec();
            let lq = log_softmax_generic(&ref_logits);

            let rho = (lp[a] - S::constant(y.behavior_logprobs[t])).exp();
            let clipped = if rho.value() < lo {
                S::constant(lo)
            } else if rho.value() > hi {
                S::constant(hi)
            } else {
                rho
            };
            let unclipped_term = rho * a_s;
            let clipped_term = clipped * a_s;
            let ratio_term = if unclipped_term.value() <= clipped_term.value() {
                unclipped_term
            } else {
                clipped_term
            };

            let mut kl = S::constant(0.0);
            for k in 0..v {
                kl = kl + lp[k].exp() * (lp[k] - S::constant(lq[k]));
            }
            per_traj = per_traj + ratio_term - S::constant(cfg.kl_coefficient) * kl;
        }
        total = total + per_traj / S::constant(y.len() as f64);
    }
    total / S::constant(group.len() as f64)
}

/// Per-prompt exact quantities from the oracle's own surrogate.
#[derive(Debug, Clone)]
struct PromptExpectation {
    mean_loss: f64,
    /// `E_y[∇ℓ]` restricted to this prompt's block.
    mean_grad_block: Vec<f64>,
    max_abs_loss: f64,
    max_loss_bound: f64,
}

fn prompt_expectation(inst: &OracleInstance, prompt: &Prompt) -> Result<PromptExpectation> {
    let v = inst.theta.vocab_size();
    let trajs = enumerate_trajectories(&inst.theta_old, prompt.id, &inst.budget)?;
    let theta_block = prompt_block(&inst.theta, prompt.id);
    let ref_block = prompt_block(&inst.reference, prompt.id);
    let eps = inst.cfg.advantage_epsilon;

    let mut loss = NeumaierSum::default();
    let mut grad: Vec<NeumaierSum> = vec![NeumaierSum::default(); theta_block.len()];
    let mut max_abs_loss: f64 = 0.0;
    let mut max_loss_bound: f64 = 0.0;
    let plain: Vec<f64> = theta_block.to_vec();
    for (idx, p) in TupleEnumeration::new(&trajs, inst.group_size) {
        let group: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i].0).collect();
        let owned: Vec<Trajectory> = group.iter().map(|y| (*y).clone()).collect();
        let rewards = compute_rewards(inst.reward_mode, prompt, &owned, v)?;
        let adv = oracle_advantages(&rewards.values, eps);
        let value = oracle_surrogate(&plain, ref_block, v, &group, &adv, &inst.cfg);
        loss.add(p * value);
        if p > 0.0 {
            max_abs_loss = max_abs_loss.max(value.abs());
            let eval = grpo::surrogate_eval(
                &inst.theta,
                &inst.reference,
                &group_of(prompt, owned, rewards, adv.clone()),
                &inst.cfg,
            )?;
            max_loss_bound = max_loss_bound.max(eval.loss_bound(&inst.cfg));
        }
        for (j, acc) in grad.iter_mut().enumerate() {
            let mut duals: Vec<Dual> = plain.iter().map(|&w| Dual::constant(w)).collect();
            duals[j] = Dual::variable(plain[j]);
            let d = oracle_surrogate(&duals, ref_block, v, &group, &adv, &inst.cfg);
            acc.add(p * d.deriv);
        }
    }
    Ok(PromptExpectation {
        mean_loss: loss.value(),
        mean_grad_block: grad.iter().map(NeumaierSum::value).collect(),
        max_abs_loss,
        max_loss_bound,
    })
}

fn group_of(
    prompt: &Prompt,
    trajectories: Vec<Trajectory>,
    rewards: crate::rewards::RewardVector,
    advantages: Vec<f64>,
) -> TrajectoryGroup {
    TrajectoryGroup {
        prompt: prompt.clone(),
        trajectories,
        rewards,
        advantages,
        confidence: 0.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactObjectives {
    /// `L(θ)`
    pub full: f64,
    /// `L_t(θ)` with population retention in the weight.
    pub curriculum: f64,
    /// `E[ℓ | w = 0]`, zero when nothing is dropped.
    pub discard: f64,
    /// `∇L_t(θ)` by forward-mode differentiation of the oracle surrogate.
    pub grad_curriculum: GradientVector,
    pub beta_population: f64,
    pub masks: Vec<bool>,
    pub confidences: Vec<f64>,
    /// `max |ℓ|` over every prompt and every tuple of positive probability.
    pub l_max_observed: f64,
    /// Largest analytic loss bound over the same tuples.
    pub l_max_bound: f64,
}

pub fn exact_objectives(inst: &OracleInstance, beta_target: f64) -> Result<ExactObjectives> {
    inst.check_budget()?;
    let (confidences, masks, beta) = inst.curriculum_mask(beta_target)?;
    let per_prompt = inst
        .dataset
        .prompts
        .par_iter()
        .map(|p| prompt_expectation(inst, p))
        .collect::<Result<Vec<_>>>()?;

    let n = inst.dataset.len() as f64;
    let block_len = inst.theta.shape().contexts_per_prompt() * inst.theta.vocab_size();
    let mut full = NeumaierSum::default();
    let mut curr = NeumaierSum::default();
    let mut discard = NeumaierSum::default();
    let dropped = masks.iter().filter(|m| !**m).count();
    let mut grad = GradientVector::zeros(inst.theta.dim());
    for (x, e) in per_prompt.iter().enumerate() {
        full.add(e.mean_loss / n);
        if masks[x] {
            curr.add(e.mean_loss / (n * beta));
            for (j, g) in e.mean_grad_block.iter().enumerate() {
                grad[x * block_len + j] += g / (n * beta);
            }
        } else {
            discard.add(e.mean_loss / dropped as f64);
        }
    }
    Ok(ExactObjectives {
        full: full.value(),
        curriculum: curr.value(),
        discard: if dropped > 0 { discard.value() } else { 0.0 },
        grad_curriculum: grad,
        beta_population: beta,
        masks,
        confidences,
        l_max_observed: per_prompt.iter().fold(0.0, |m, e| m.max(e.max_abs_loss)),
        l_max_bound: per_prompt.iter().fold(0.0, |m, e| m.max(e.max_loss_bound)),
    })
}

/// Per-prompt moments of the analytic group gradient `g(x, y_{1:G})`.
#[derive(Debug, Clone)]
struct GradientMoments {
    mean: GradientVector,
    variance: f64,
    max_norm: f64,
}

fn groups_for_prompt(inst: &OracleInstance, prompt: &Prompt) -> Result<Vec<(TrajectoryGroup, f64)>> {
    let v = inst.theta.vocab_size();
    let trajs = enumerate_trajectories(&inst.theta_old, prompt.id, &inst.budget)?;
    TupleEnumeration::new(&trajs, inst.group_size)
        .map(|(idx, p)| {
            let owned: Vec<Trajectory> = idx.iter().map(|&i| trajs[i].0.clone()).collect();
            let rewards = compute_rewards(inst.reward_mode, prompt, &owned, v)?;
            let adv = grpo::compute_advantages(&rewards.values, inst.cfg.advantage_epsilon)?;
            Ok((group_of(prompt, owned, rewards, adv), p))
        })
        .collect()
}

fn gradient_moments(inst: &OracleInstance, prompt: &Prompt) -> Result<GradientMoments> {
    let groups = groups_for_prompt(inst, prompt)?;
    let grads = groups
        .iter()
        .map(|(g, _)| grpo::surrogate_gradient(&inst.theta, &inst.reference, g, &inst.cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = VectorAccumulator::new(inst.theta.dim());
    for (g, (_, p)) in grads.iter().zip(&groups) {
        acc.add_scaled(g, *p);
    }
    let mean = acc.finish();
    let mut variance = NeumaierSum::default();
    let mut max_norm: f64 = 0.0;
    for (g, (_, p)) in grads.iter().zip(&groups) {
        variance.add(p * g.dist_sq(&mean));
        if *p > 0.0 {
            max_norm = max_norm.max(g.norm());
        }
    }
    Ok(GradientMoments {
        mean,
        variance: variance.value(),
        max_norm,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub residual: f64,
    pub expected_estimator: GradientVector,
    pub grad_curriculum: GradientVector,
    pub beta_population: f64,
}

/// `‖E[ĝ_t] − ∇L_t‖ / max(‖∇L_t‖, 1e-12)` with `E[ĝ_t]` summed from the
/// analytic per-tuple gradients and `∇L_t` from the forward-mode route.
pub fn exact_unbiasedness_check(inst: &OracleInstance, beta_target: f64) -> Result<UnbiasednessReport> {
    let objectives = exact_objectives(inst, beta_target)?;
    let beta = objectives.beta_population;
    let n = inst.dataset.len() as f64;
    let per_prompt = inst
        .dataset
        .prompts
        .par_iter()
        .map(|p| -> Result<Option<GradientVector>> {
            if !objectives.masks[p.id] {
                return Ok(None);
            }
            let mut acc = VectorAccumulator::new(inst.theta.dim());
            for (group, prob) in groups_for_prompt(inst, p)? {
                let g = grpo::surrogate_gradient(&inst.theta, &inst.reference, &group, &inst.cfg)?;
                acc.add_scaled(&g, prob / (n * beta));
            }
            Ok(Some(acc.finish()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut expected = GradientVector::zeros(inst.theta.dim());
    for g in per_prompt.iter().flatten() {
        expected.add_scaled(g, 1.0);
    }
    let residual = expected.dist_sq(&objectives.grad_curriculum).sqrt() / objectives.grad_curriculum.norm().max(1e-12);
    Ok(UnbiasednessReport {
        residual,
        expected_estimator: expected,
        grad_curriculum: objectives.grad_curriculum,
        beta_population: beta,
    })
}

/// Exact variance components plus the exact bound inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactVariance {
    pub report: VarianceReport,
    /// Relative gap between the three-term sum and the direct variance.
    pub identity_residual: f64,
    /// Largest `‖g‖` over kept prompts and tuples: the empirical `G_conf(τ)`.
    pub g_conf_tau: f64,
    /// `G_conf(τ)²/β − ‖∇L_t‖² − Var(ĝ_t)`
    pub envelope_slack: f64,
    pub tau: f64,
}

pub fn exact_variance_components(inst: &OracleInstance, beta_target: f64) -> Result<ExactVariance> {
    inst.check_budget()?;
    let (confidences, masks, beta) = inst.curriculum_mask(beta_target)?;
    let moments = inst
        .dataset
        .prompts
        .par_iter()
        .map(|p| gradient_moments(inst, p))
        .collect::<Result<Vec<_>>>()?;
    let n = inst.dataset.len();
    let kept: Vec<usize> = (0..n).filter(|&x| masks[x]).collect();
    let all: Vec<usize> = (0..n).collect();

    let sigma = |set: &[usize]| set.iter().map(|&x| moments[x].variance).sum::<f64>() / set.len() as f64;
    let spread = |set: &[usize]| {
        let mut acc = VectorAccumulator::new(inst.theta.dim());
        for &x in set {
            acc.add_scaled(&moments[x].mean, 1.0 / set.len() as f64);
        }
        let centre = acc.finish();
        let v = set.iter().map(|&x| moments[x].mean.dist_sq(&centre)).sum::<f64>() / set.len() as f64;
        (centre, v)
    };
    let sigma_kept = sigma(&kept);
    let sigma_full = sigma(&all);
    let (grad_lt, v_kept) = spread(&kept);
    let (_, v_full) = spread(&all);
    let grad_norm_sq = grad_lt.norm_sq();
    let masking = (1.0 - beta) / beta * grad_norm_sq;

    // Direct route: E‖ĝ − E ĝ‖² over (x, tuple), dropped prompts giving ĝ = 0.
    let per_prompt_groups = inst
        .dataset
        .prompts
        .par_iter()
        .map(|p| -> Result<Vec<(GradientVector, f64)>> {
            if !masks[p.id] {
                return Ok(Vec::new());
            }
            groups_for_prompt(inst, p)?
                .into_iter()
                .map(|(g, prob)| {
                    let mut grad = grpo::surrogate_gradient(&inst.theta, &inst.reference, &g, &inst.cfg)?;
                    grad.scale(1.0 / beta);
                    Ok((grad, prob))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean_acc = VectorAccumulator::new(inst.theta.dim());
    for samples in &per_prompt_groups {
        for (g, p) in samples {
            mean_acc.add_scaled(g, p / n as f64);
        }
    }
    let mean_est = mean_acc.finish();
    let mut direct = NeumaierSum::default();
    let zero = GradientVector::zeros(inst.theta.dim());
    for (x, samples) in per_prompt_groups.iter().enumerate() {
        if masks[x] {
            for (g, p) in samples {
                direct.add(p / n as f64 * g.dist_sq(&mean_est));
            }
        } else {
            direct.add(zero.dist_sq(&mean_est) / n as f64);
        }
    }
    let total_direct = direct.value();
    let total_decomposed = sigma_kept / beta + v_kept / beta + masking;
    let identity_residual =
        (total_decomposed - total_direct).abs() / total_direct.max(crate::diagnostics::VARIANCE_FLOOR);

    let g_conf_tau = kept.iter().map(|&x| moments[x].max_norm).fold(0.0, f64::max);
    let envelope_slack = g_conf_tau * g_conf_tau / beta - grad_norm_sq - total_direct;
    let tau = kept.iter().map(|&x| confidences[x]).fold(f64::INFINITY, f64::min);
    let consistency = exact_consistency(inst, beta_target)?;

    let report = VarianceReport {
        beta,
        weight_convention: WeightConvention::Population,
        sigma_g2: sigma_kept,
        sigma_g2_full: sigma_full,
        v_prob: v_kept,
        v_prob_full: v_full,
        v_prob_raw: v_kept,
        v_prob_full_raw: v_full,
        grad_norm_sq,
        masking,
        total_decomposed,
        total_direct: Some(total_direct),
        ratio_sigma: ratio(sigma_kept, sigma_full),
        ratio_vprob: ratio(v_kept, v_full),
        g_conf_tau,
        l_max: consistency.l_max,
        bound_thm1_slack: consistency.slack,
        bound_lemma1_slack: envelope_slack,
        sample_counts: SampleCounts {
            prompts_kept: kept.len(),
            prompts_full: n,
            repeats_per_prompt: 0,
            direct_samples: 0,
        },
    };
    Ok(ExactVariance {
        report,
        identity_residual,
        g_conf_tau,
        envelope_slack,
        tau,
    })
}

/// Exact consistency gap and its bound at one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    pub gap: f64,
    pub l_max: f64,
    pub bound: f64,
    pub slack: f64,
    pub beta_population: f64,
    /// `|L − (β L_t + (1−β) L_discard)|`
    pub split_residual: f64,
}

pub fn exact_consistency(inst: &OracleInstance, beta_target: f64) -> Result<ConsistencyCheck> {
    let obj = exact_objectives(inst, beta_target)?;
    let beta = obj.beta_population;
    let gap = (obj.full - obj.curriculum).abs();
    let bound = 2.0 * obj.l_max_observed * (1.0 - beta);
    Ok(ConsistencyCheck {
        gap,
        l_max: obj.l_max_observed,
        bound,
        slack: bound - gap,
        beta_population: beta,
        split_residual: (obj.full - (beta * obj.curriculum + (1.0 - beta) * obj.discard)).abs(),
    })
}
