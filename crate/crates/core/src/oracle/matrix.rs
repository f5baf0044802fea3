//! The fixed grid of enumerable instances every exact check runs on.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{exact_consistency, exact_unbiasedness_check, exact_variance_components, InstanceSpec, OracleInstance};
use crate::error::{Error, Result};
use crate::rewards::RewardMode;

pub const MATRIX_BETAS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixTolerances {
    pub unbiasedness: f64,
    pub identity: f64,
    /// Rounding allowance for the bound slacks, relative to the bound's size.
    pub bound_rounding: f64,
}

impl Default for MatrixTolerances {
    fn default() -> Self {
        Self {
            unbiasedness: 1e-9,
            identity: 1e-9,
            bound_rounding: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixCase {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub reward_mode: RewardMode,
    pub seed: u64,
    pub beta_target: f64,
    pub beta_population: f64,
    pub unbiasedness_residual: f64,
    pub identity_residual: f64,
    pub consistency_gap: f64,
    pub consistency_slack: f64,
    pub consistency_bound: f64,
    pub envelope_slack: f64,
    pub envelope_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cases: Vec<MatrixCase>,
    pub max_unbiasedness_residual: f64,
    pub max_identity_residual: f64,
    pub min_consistency_slack: f64,
    pub min_envelope_slack: f64,
    pub unbiasedness_passed: bool,
    pub identity_passed: bool,
    pub consistency_passed: bool,
    pub envelope_passed: bool,
    pub zero_gap_at_full_retention: bool,
    pub elapsed_secs: f64,
    pub tolerances: MatrixTolerances,
}

impl MatrixReport {
    pub fn passed(&self) -> bool {
        self.unbiasedness_passed
            && self.identity_passed
            && self.consistency_passed
            && self.envelope_passed
            && self.zero_gap_at_full_retention
    }
}

/// Axes of an instance grid. Unknown keys are rejected when read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub vocab_sizes: Vec<usize>,
    pub max_lens: Vec<usize>,
    pub prompt_counts: Vec<usize>,
    pub reward_modes: Vec<RewardMode>,
    pub betas: Vec<f64>,
    pub group_size: usize,
    /// Seed of the first instance; later instances count up from it.
    pub seed: u64,
    pub tolerances: MatrixTolerances,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            vocab_sizes: vec![2, 3],
            max_lens: vec![1, 2],
            prompt_counts: vec![2, 3, 4],
            reward_modes: vec![RewardMode::Oracle, RewardMode::MajorityVote, RewardMode::Entropy],
            betas: MATRIX_BETAS.to_vec(),
            group_size: 2,
            seed: 0,
            tolerances: MatrixTolerances::default(),
        }
    }
}

impl MatrixConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty()
            || self.max_lens.is_empty()
            || self.prompt_counts.is_empty()
            || self.reward_modes.is_empty()
            || self.betas.is_empty()
        {
            return Err(Error::Config("every matrix axis needs at least one value".into()));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::InvalidRetention(*b));
        }
        Ok(())
    }

    /// Instance specs with their seeds, one per size and reward mode.
    pub fn specs(&self) -> Vec<(InstanceSpec, u64)> {
        let mut out = Vec::new();
        let mut seed = self.seed;
        for &vocab in &self.vocab_sizes {
            for &len in &self.max_lens {
                for &prompts in &self.prompt_counts {
                    for &mode in &self.reward_modes {
                        let mut spec = InstanceSpec::new(vocab, len, prompts);
                        spec.reward_mode = mode;
                        spec.group_size = self.group_size;
                        out.push((spec, seed));
                        seed += 1;
                    }
                }
            }
        }
        out
    }
}

/// Sizes, reward modes and seeds of the default grid.
pub fn matrix_specs() -> Vec<(InstanceSpec, u64)> {
    MatrixConfig::default().specs()
}

pub fn evaluate_case(inst: &OracleInstance, beta: f64, seed: u64) -> Result<MatrixCase> {
    let unbiased = exact_unbiasedness_check(inst, beta)?;
    let variance = exact_variance_components(inst, beta)?;
    let consistency = exact_consistency(inst, beta)?;
    let b = variance.report.beta;
    Ok(MatrixCase {
        vocab_size: inst.theta.vocab_size(),
        max_len: inst.theta.max_len(),
        num_prompts: inst.dataset.len(),
        reward_mode: inst.reward_mode,
        seed,
        beta_target: beta,
        beta_population: b,
        unbiasedness_residual: unbiased.residual,
        identity_residual: variance.identity_residual,
        consistency_gap: consistency.gap,
        consistency_slack: consistency.slack,
        consistency_bound: consistency.bound,
        envelope_slack: variance.envelope_slack,
        envelope_bound: variance.g_conf_tau * variance.g_conf_tau / b,
    })
}

/// The default grid with the given tolerances.
pub fn run_matrix(tol: &MatrixTolerances) -> Result<MatrixReport> {
    run_matrix_with(&MatrixConfig {
        tolerances: tol.clone(),
        ..MatrixConfig::default()
    })
}

pub fn run_matrix_with(cfg: &MatrixConfig) -> Result<MatrixReport> {
    cfg.validate()?;
    let start = Instant::now();
    let jobs: Vec<(InstanceSpec, u64, f64)> = cfg
        .specs()
        .into_iter()
        .flat_map(|(spec, seed)| cfg.betas.iter().map(move |&b| (spec, seed, b)))
        .collect();
    let cases = jobs
        .par_iter()
        .map(|(spec, seed, beta)| {
            let inst = OracleInstance::random(spec, *seed)?;
            evaluate_case(&inst, *beta, *seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cases, cfg.tolerances.clone(), start.elapsed().as_secs_f64()))
}

pub fn summarize(cases: Vec<MatrixCase>, tolerances: MatrixTolerances, elapsed_secs: f64) -> MatrixReport {
    let max = |f: fn(&MatrixCase) -> f64| cases.iter().map(f).fold(0.0, f64::max);
    let min = |f: fn(&MatrixCase) -> f64| cases.iter().map(f).fold(f64::INFINITY, f64::min);
    let r = tolerances.bound_rounding;
    MatrixReport {
        max_unbiasedness_residual: max(|c| c.unbiasedness_residual),
        max_identity_residual: max(|c| c.identity_residual),
        min_consistency_slack: min(|c| c.consistency_slack),
        min_envelope_slack: min(|c| c.envelope_slack),
        unbiasedness_passed: cases.iter().all(|c| c.unbiasedness_residual <= tolerances.unbiasedness),
        identity_passed: cases.iter().all(|c| c.identity_residual <= tolerances.identity),
        consistency_passed: cases
            .iter()
            .all(|c| c.consistency_slack >= -r * c.consistency_bound.max(1.0)),
        envelope_passed: cases.iter().all(|c| c.envelope_slack >= -r * c.envelope_bound.max(1.0)),
        zero_gap_at_full_retention: cases
            .iter()
            .filter(|c| c.beta_population == 1.0)
            .all(|c| c.consistency_gap == 0.0),
        cases,
        elapsed_secs,
        tolerances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        assert_eq!(matrix_specs().len(), 36);
        let cfg = MatrixConfig::from_toml_str("vocab_sizes = [2]\nbetas = [0.5]\n").unwrap();
        assert_eq!(cfg.specs().len(), 18);
        assert!(MatrixConfig::from_toml_str("vocab = [2]").is_err());
        assert!(MatrixConfig::from_toml_str("betas = [0.0]").is_err());
    }

    #[test]
    fn small_grid_passes() {
        let cfg = MatrixConfig {
            vocab_sizes: vec![2],
            max_lens: vec![1],
            prompt_counts: vec![2, 3],
            ..MatrixConfig::default()
        };
        let report = run_matrix_with(&cfg).unwrap();
        assert_eq!(report.cases.len(), 2 * 3 * 4);
        assert!(report.passed());
    }
}
