//! Reward mode × method matrix over several seeds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::run::{prepare, run_experiment};
use crate::rewards::RewardMode;

/// An ablation file: a base experiment and the axes to vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub reward_modes: Vec<RewardMode>,
    pub methods: Vec<Method>,
    pub base: ExperimentConfig,
}

impl AblationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.seeds.is_empty() || cfg.reward_modes.is_empty() || cfg.methods.is_empty() {
            return Err(Error::Config(
                "seeds, reward_modes and methods must be non-empty".into(),
            ));
        }
        cfg.base.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Cell configs grouped by reward mode, methods in the listed order.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &mode in &self.reward_modes {
            for &method in &self.methods {
                let mut c = self.base.clone();
                c.reward_mode = mode;
                c.method = method;
                out.push(c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub reward_mode: RewardMode,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub pass_at_1: Vec<f64>,
    pub pass_at_8: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationCell {
    pub fn pass_at_1_stats(&self) -> (f64, f64) {
        mean_and_sample_std(&self.pass_at_1)
    }

    pub fn pass_at_8_stats(&self) -> (f64, f64) {
        mean_and_sample_std(&self.pass_at_8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config_hash: String,
    pub cells: Vec<AblationCell>,
}

fn matrix_hash(matrix: &[ExperimentConfig], seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    for c in matrix {
        h.update(c.hash().as_bytes());
    }
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs every `(config, seed)` pair. All configs must evaluate on the same
/// prompt set for a given seed.
pub fn run_ablation(matrix: &[ExperimentConfig], seeds: &[u64]) -> Result<AblationSummary> {
    if matrix.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one config and one seed".into()));
    }
    for &s in seeds {
        let first = prepare(&matrix[0].with_seed(s))?.dataset;
        for c in &matrix[1..] {
            if prepare(&c.with_seed(s))?.dataset != first {
                return Err(Error::Config(format!(
                    "configs do not share an evaluation set for seed {s}"
                )));
            }
        }
    }
    let jobs: Vec<(usize, u64)> = (0..matrix.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let finals = jobs
        .par_iter()
        .map(|&(i, s)| {
            let record = run_experiment(&matrix[i].with_seed(s))?;
            let row = record
                .final_eval()
                .ok_or_else(|| Error::Config("run produced no evaluation".into()))?;
            Ok((row.pass_at_1.unwrap_or(f64::NAN), row.pass_at_8.unwrap_or(f64::NAN)))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = matrix
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let vals = &finals[i * seeds.len()..(i + 1) * seeds.len()];
            AblationCell {
                reward_mode: c.reward_mode,
                method: c.method,
                seeds: seeds.to_vec(),
                pass_at_1: vals.iter().map(|v| v.0).collect(),
                pass_at_8: vals.iter().map(|v| v.1).collect(),
            }
        })
        .collect();
    Ok(AblationSummary {
        config_hash: matrix_hash(matrix, seeds),
        cells,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";")
}

impl AblationSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str(
            "reward_mode,method,n_seeds,pass_at_1_mean,pass_at_1_std,pass_at_8_mean,pass_at_8_std,\
             seeds,pass_at_1_per_seed,pass_at_8_per_seed\n",
        );
        for c in &self.cells {
            let (m1, s1) = c.pass_at_1_stats();
            let (m8, s8) = c.pass_at_8_stats();
            let seeds = c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            let _ = writeln!(
                out,
                "{},{},{},{m1:.6},{s1:.6},{m8:.6},{s8:.6},{seeds},{},{}",
                c.reward_mode,
                c.method,
                c.seeds.len(),
                join(&c.pass_at_1),
                join(&c.pass_at_8)
            );
        }
        out
    }

    pub fn cell(&self, mode: RewardMode, method: Method) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.reward_mode == mode && c.method == method)
    }
}
