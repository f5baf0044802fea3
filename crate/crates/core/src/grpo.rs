//! Group-relative clipped surrogate and its analytic gradient.
//!
//! For one prompt with `G` rollouts the per-prompt surrogate is
//!
//! ```text
//! ℓ(θ) = (1/G) Σ_i (1/T_i) Σ_t [ min(ρ_it A_i, clip(ρ_it, 1-ε, 1+ε) A_i)
//!                                - β_KL · KL(π_θ(·|s_it) || π_ref(·|s_it)) ]
//! ```
//!
//! with `ρ_it = π_θ(a_it|s_it) / π_old(a_it|s_it)`. The behaviour policy
//! enters only through the log-probabilities recorded on each trajectory at
//! rollout time. Advantages, masks and curriculum weights are constants.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum;
use crate::error::{Error, Result};
use crate::numeric::{mean_and_std, GradientVector};
use crate::policy::{log_softmax, softmax, PolicyParams, Trajectory};
use crate::rewards::RewardVector;
use crate::tasks::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub advantage_epsilon: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_coefficient: 0.001,
            advantage_epsilon: 1e-6,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "kl_coefficient must be finite and >= 0, got {}",
                self.kl_coefficient
            )));
        }
        if !(self.advantage_epsilon > 0.0 && self.advantage_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "advantage_epsilon must be positive, got {}",
                self.advantage_epsilon
            )));
        }
        Ok(())
    }
}

/// One prompt's rollouts with everything the surrogate treats as constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub prompt: Prompt,
    pub trajectories: Vec<Trajectory>,
    pub rewards: RewardVector,
    pub advantages: Vec<f64>,
    pub confidence: f64,
}

impl TrajectoryGroup {
    pub fn new(
        prompt: Prompt,
        trajectories: Vec<Trajectory>,
        rewards: RewardVector,
        advantage_epsilon: f64,
        vocab_size: usize,
    ) -> Result<Self> {
        if rewards.values.len() != trajectories.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rewards for {} rollouts",
                rewards.values.len(),
                trajectories.len()
            )));
        }
        let advantages = compute_advantages(&rewards.values, advantage_epsilon)?;
        let confidence = curriculum::confidence(&trajectories, vocab_size)?;
        Ok(Self {
            prompt,
            trajectories,
            rewards,
            advantages,
            confidence,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}

/// `A_i = (R_i - mean) / (population std + ε)`
pub fn compute_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_and_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect())
}

pub fn clip_term(rho: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch of `min` is selected; ties count as unclipped.
fn ratio_branch_active(rho: f64, advantage: f64, clip_epsilon: f64) -> bool {
    let clipped = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    rho * advantage <= clipped * advantage
}

/// Exact categorical `KL(current || reference)`.
pub fn kl_term(current: &[f64], reference: &[f64]) -> Result<f64> {
    if current.len() != reference.len() {
        return Err(Error::ShapeMismatch("distributions differ in length".into()));
    }
    let mut kl = 0.0;
    for (&p, &q) in current.iter().zip(reference) {
        if p < 0.0 {
            return Err(Error::NegativeProbability(p));
        }
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::SupportMismatch);
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// KL between the softmaxes of two logit vectors, computed in log space.
fn kl_from_logits(current: &[f64], reference: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let log_p = log_softmax(current);
    let log_q = log_softmax(reference);
    let mut kl = 0.0;
    for (lp, lq) in log_p.iter().zip(&log_q) {
        kl += lp.exp() * (lp - lq);
    }
    (kl, log_p, log_q)
}

/// Loss value plus the quantities that bound it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateEval {
    pub loss: f64,
    pub max_ratio: f64,
    pub max_token_kl: f64,
    pub max_abs_advantage: f64,
}

impl SurrogateEval {
    /// Upper bound on `|ℓ|`: `max(1+ε, ρ_max)·max|A| + β_KL·max KL`.
    ///
    /// The clipped term with `A < 0` grows like `ρ|A|` once `ρ > 1+ε`,
    /// so the ratio factor is the larger of `1+ε` and the largest ratio seen.
    pub fn loss_bound(&self, cfg: &SurrogateConfig) -> f64 {
        (1.0 + cfg.clip_epsilon).max(self.max_ratio) * self.max_abs_advantage + cfg.kl_coefficient * self.max_token_kl
    }
}

fn check_inputs(theta: &PolicyParams, reference: &PolicyParams, group: &TrajectoryGroup) -> Result<()> {
    if theta.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(
            "current and reference policies differ in shape".into(),
        ));
    }
    if group.trajectories.is_empty() || group.advantages.len() != group.trajectories.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} advantages for {} rollouts",
            group.advantages.len(),
            group.trajectories.len()
        )));
    }
    for y in &group.trajectories {
        theta.check_trajectory(y)?;
    }
    Ok(())
}

fn evaluate(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: &TrajectoryGroup,
    cfg: &SurrogateConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<SurrogateEval> {
    check_inputs(theta, reference, group)?;
    let g = group.size() as f64;
    let eps = cfg.clip_epsilon;
    let mut loss = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut max_token_kl: f64 = 0.0;
    for (y, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let len = y.len() as f64;
        let mut traj_sum = 0.0;
        for (t, &a) in y.tokens.iter().enumerate() {
            let ctx = y.context(t);
            let off = theta.block_offset(&ctx)?;
            let z = theta.logits(&ctx)?;
            let (kl, log_p, log_q) = kl_from_logits(z, reference.logits(&ctx)?);
            let rho = (log_p[a] - y.behavior_logprobs[t]).exp();
            traj_sum += clip_term(rho, adv, eps) - cfg.kl_coefficient * kl;
            max_ratio = max_ratio.max(rho);
            max_token_kl = max_token_kl.max(kl);

            if let Some(grad) = grad.as_deref_mut() {
                let scale = 1.0 / (g * len);
                let block = &mut grad[off..off + z.len()];
                if adv != 0.0 && ratio_branch_active(rho, adv, eps) {
                    // d(ρA)/dz = ρA (e_a - p)
                    let c = scale * rho * adv;
                    for (k, slot) in block.iter_mut().enumerate() {
                        let pk = log_p[k].exp();
                        *slot += c * (if k == a { 1.0 - pk } else { -pk });
                    }
                }
                if cfg.kl_coefficient != 0.0 {
                    // dKL/dz_k = p_k (log p_k - log q_k - KL)
                    let c = scale * cfg.kl_coefficient;
                    for (k, slot) in block.iter_mut().enumerate() {
                        let pk = log_p[k].exp();
                        *slot -= c * pk * (log_p[k] - log_q[k] - kl);
                    }
                }
            }
        }
        loss += traj_sum / len;
    }
    let max_abs_advantage = group.advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    Ok(SurrogateEval {
        loss: loss / g,
        max_ratio,
        max_token_kl,
        max_abs_advantage,
    })
}

pub fn surrogate_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: &TrajectoryGroup,
    cfg: &SurrogateConfig,
) -> Result<f64> {
    Ok(evaluate(theta, reference, group, cfg, None)?.loss)
}

/// Loss together with the inputs of its bound.
pub fn surrogate_eval(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: &TrajectoryGroup,
    cfg: &SurrogateConfig,
) -> Result<SurrogateEval> {
    evaluate(theta, reference, group, cfg, None)
}

/// Analytic (sub)gradient of [`surrogate_loss`] with respect to the logits.
pub fn surrogate_gradient(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: &TrajectoryGroup,
    cfg: &SurrogateConfig,
) -> Result<GradientVector> {
    let mut grad = vec![0.0; theta.dim()];
    evaluate(theta, reference, group, cfg, Some(&mut grad))?;
    Ok(GradientVector::from_vec(grad))
}

/// Loss and gradient in one pass.
pub fn surrogate_value_and_gradient(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: &TrajectoryGroup,
    cfg: &SurrogateConfig,
) -> Result<(SurrogateEval, GradientVector)> {
    let mut grad = vec![0.0; theta.dim()];
    let eval = evaluate(theta, reference, group, cfg, Some(&mut grad))?;
    Ok((eval, GradientVector::from_vec(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Inner epochs `K` per outer step.
    pub epochs: usize,
    /// 0 means one minibatch holding the whole batch.
    pub minibatch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 1,
            minibatch_size: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InnerLoopOutcome {
    pub params: PolicyParams,
    pub updates: usize,
    /// Set when every weight was zero and no update was applied.
    pub empty_kept_set: bool,
}

/// `K` epochs of minibatched SGD ascent on the weighted surrogate.
///
/// Each epoch shuffles the batch with `rng` and walks it in chunks of
/// `minibatch_size`; every chunk applies
/// `θ ← θ + η · (1/|M|) Σ_{j∈M} weights[j] · ∇ℓ_j(θ)`.
/// Per-group gradients may be computed in parallel, but they are reduced in
/// minibatch order so results are bit-reproducible.
pub fn inner_loop_update<R: Rng + ?Sized>(
    theta: &PolicyParams,
    reference: &PolicyParams,
    groups: &[TrajectoryGroup],
    weights: &[f64],
    cfg: &SurrogateConfig,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<InnerLoopOutcome> {
    if groups.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} groups",
            weights.len(),
            groups.len()
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(InnerLoopOutcome {
            params: theta.clone(),
            updates: 0,
            empty_kept_set: true,
        });
    }
    let mb = if opt.minibatch_size == 0 {
        groups.len()
    } else {
        opt.minibatch_size.min(groups.len())
    };
    let mut params = theta.clone();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut updates = 0;
    for _ in 0..opt.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let grads: Vec<Option<GradientVector>> = chunk
                .par_iter()
                .map(|&j| {
                    if weights[j] == 0.0 {
                        Ok(None)
                    } else {
                        surrogate_gradient(&params, reference, &groups[j], cfg).map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            let mut step = GradientVector::zeros(params.dim());
            for (&j, g) in chunk.iter().zip(&grads) {
                if let Some(g) = g {
                    step.add_scaled(g, weights[j]);
                }
            }
            step.scale(1.0 / chunk.len() as f64);
            params.add_scaled(&step, opt.learning_rate)?;
            updates += 1;
        }
    }
    Ok(InnerLoopOutcome {
        params,
        updates,
        empty_kept_set: false,
    })
}

/// Probability vectors for every context one trajectory visits.
pub fn visited_distributions(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    (0..traj.len())
        .map(|t| Ok(softmax(params.logits(&traj.context(t))?, 1.0)))
        .collect()
}
