//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{RetentionSchedule, SelectionRule};
use crate::error::{Error, Result};
use crate::grpo::{OptimizerConfig, SurrogateConfig};
use crate::rewards::RewardMode;
use crate::tasks::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Every batch prompt kept with weight 1.
    NoCurriculum,
    /// Confidence-ranked selection with `mask/β̂` weights.
    ViCurl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoCurriculum => "no_curriculum",
            Method::ViCurl => "vi_curl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_curriculum" => Ok(Method::NoCurriculum),
            "vi_curl" => Ok(Method::ViCurl),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Reference-policy boost per difficulty level.
    pub sharpness: Vec<f64>,
    /// Strength of a confidently wrong path per level; empty for none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortcut: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub beta_start: f64,
    /// `T_curr` as a fraction of `total_steps` (ignored if `curriculum_steps` is set).
    pub curriculum_fraction: f64,
    pub curriculum_steps: Option<usize>,
    pub selection_rule: SelectionRule,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            beta_start: 0.2,
            curriculum_fraction: 1.0,
            curriculum_steps: None,
            selection_rule: SelectionRule::TopK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every `every` steps; the initial and final policies always are.
    pub every: usize,
    /// Samples per prompt `n`.
    pub samples: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 10,
            samples: 16,
            ks: vec![1, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Run diagnostics every `every` steps; 0 disables them.
    pub every: usize,
    /// Group draws per batch prompt `K`.
    pub repeats: usize,
    /// Direct `ĝ` draws per diagnostic step; 0 skips the direct estimate.
    pub direct_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            every: 0,
            repeats: 8,
            direct_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds the dataset; defaults to `seed`. Runs that should share an
    /// evaluation set across training seeds set this explicitly.
    #[serde(default)]
    pub dataset_seed: Option<u64>,
    pub method: Method,
    pub reward_mode: RewardMode,
    pub total_steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub dataset: TaskConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.surrogate.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let prompts: usize = self.dataset.counts.iter().sum();
        if self.batch_size > prompts {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the dataset's {prompts} prompts",
                self.batch_size
            )));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.policy.sharpness.len() != self.dataset.levels() {
            return Err(Error::Config(format!(
                "sharpness has {} entries for {} difficulty levels",
                self.policy.sharpness.len(),
                self.dataset.levels()
            )));
        }
        if !self.policy.shortcut.is_empty() && self.policy.shortcut.len() != self.dataset.levels() {
            return Err(Error::Config(format!(
                "shortcut has {} entries for {} difficulty levels",
                self.policy.shortcut.len(),
                self.dataset.levels()
            )));
        }
        if self.eval.ks.is_empty() {
            return Err(Error::Config("eval.ks must not be empty".into()));
        }
        if let Some(&k) = self.eval.ks.iter().find(|&&k| k == 0 || k > self.eval.samples) {
            return Err(Error::Config(format!(
                "pass@{k} needs 1 <= k <= eval.samples = {}",
                self.eval.samples
            )));
        }
        if self.diagnostics.every > 0 && self.diagnostics.repeats < 2 {
            return Err(Error::Config("diagnostics.repeats must be at least 2".into()));
        }
        if self.diagnostics.direct_samples == 1 {
            return Err(Error::Config(
                "diagnostics.direct_samples must be 0 or at least 2".into(),
            ));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<RetentionSchedule> {
        let c = &self.curriculum;
        match c.curriculum_steps {
            Some(steps) => RetentionSchedule::new(c.beta_start, self.total_steps, steps),
            None => RetentionSchedule::from_fraction(c.beta_start, self.total_steps, c.curriculum_fraction),
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.seed)
    }

    /// A copy with a different training seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
