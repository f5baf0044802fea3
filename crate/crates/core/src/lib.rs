//! Desk-scale GRPO laboratory with a confidence-guided curriculum.
//!
//! The policy is a tabular autoregressive softmax small enough that every
//! trajectory and every ordered rollout group can be enumerated. That makes
//! exact expectations available next to the Monte-Carlo estimators used in
//! training, so the curriculum estimator's unbiasedness, its consistency
//! bound and its variance decomposition can all be checked numerically.
//!
//! Module map:
//!
//! - [`policy`]: parameters, sampling, log-probabilities, entropies, gradients
//! - [`tasks`]: synthetic modular-arithmetic prompts and the verifier
//! - [`rewards`]: oracle, majority-vote and entropy reward modes
//! - [`grpo`]: advantages, clipped surrogate, KL term, analytic gradient, inner loop
//! - [`curriculum`]: confidence, retention schedule, selection, weights
//! - [`diagnostics`]: Monte-Carlo variance components and bound checks
//! - [`oracle`]: brute-force enumeration of all of the above
//! - [`harness`]: configuration, seeded runs, pass@k evaluation, ablations

pub mod curriculum;
pub mod diagnostics;
mod error;
pub mod grpo;
pub mod harness;
pub mod numeric;
pub mod oracle;
pub mod policy;
pub mod rewards;
pub mod tasks;

pub use curriculum::{CurriculumState, RetentionSchedule, Selection, SelectionRule};
pub use diagnostics::{BoundParams, VarianceReport};
pub use error::{Error, Result};
pub use grpo::{SurrogateConfig, TrajectoryGroup};
pub use numeric::GradientVector;
pub use policy::{ContextKey, PolicyParams, PolicyShape, Token, Trajectory};
pub use rewards::{RewardMode, RewardVector};
pub use tasks::{Dataset, Prompt, TaskConfig};
