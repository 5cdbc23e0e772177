//! Scheduled beam search over pruned sub-models.
//!
//! Each step lowers the latency goal, lets every alive model grow one child
//! per channel group by stripping its least important channels until the goal
//! is met, and keeps the children that lost the least importance.

mod curve;
mod run;
mod trainer;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::TrainConfig;
use crate::importance::ReductionConfig;

pub use curve::{latency_curve, sweep_counts, CurvePoint, LatencyCurve, Sweep};
pub use run::{blossom, run, BlossomOutcome, BlossomRequest, ResultBundle, RunOutcome, RunReport, Services, StepReport};
pub use trainer::{FixedImportance, GradientTrainer, StepTrainer, StepTraining};
pub use tree::{Node, Tree};

/// Goal for step `i` of `steps`, interpolating linearly from `root_ms` to
/// `goal_ms`.
pub fn latency_schedule(root_ms: f64, goal_ms: f64, steps: usize, i: usize) -> Result<f64> {
    if steps == 0 || i == 0 || i > steps {
        return Err(Error::InvalidArgument(format!("step {i} outside 1..={steps}")));
    }
    if goal_ms.is_nan() || goal_ms >= root_ms {
        return Err(Error::InvalidArgument(format!(
            "goal {goal_ms} ms must be below the root latency {root_ms} ms"
        )));
    }
    if i == steps {
        return Ok(goal_ms);
    }
    let (s, i) = (steps as f64, i as f64);
    Ok(((s - i) * root_ms + i * goal_ms) / s)
}

/// How many channels one latency probe removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StepPolicy {
    /// The power of two closest above `sqrt(C)`.
    #[default]
    Sqrt,
    /// `max(1, ceil(log2 C))`.
    Log,
    Fixed(usize),
}

/// Channels removed per probe for a group currently holding `channels`.
pub fn exploration_step(channels: usize, policy: StepPolicy) -> Result<usize> {
    if channels == 0 {
        return Err(Error::InvalidArgument("channel count must be at least 1".into()));
    }
    Ok(match policy {
        StepPolicy::Sqrt => {
            // 2^ceil(log2 sqrt C) = 2^ceil(log2(C) / 2), computed on integers.
            let log2_ceil = usize::BITS - (channels - 1).leading_zeros();
            1usize << log2_ceil.div_ceil(2)
        }
        StepPolicy::Log => {
            let log2_ceil = (usize::BITS - (channels - 1).leading_zeros()) as usize;
            log2_ceil.max(1)
        }
        StepPolicy::Fixed(k) => k,
    })
}

impl fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepPolicy::Sqrt => f.write_str("sqrt"),
            StepPolicy::Log => f.write_str("log"),
            StepPolicy::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for StepPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sqrt" => Ok(StepPolicy::Sqrt),
            "log" => Ok(StepPolicy::Log),
            other => match other.strip_prefix("fixed:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(StepPolicy::Fixed(k)),
                _ => Err(Error::InvalidArgument(format!(
                    "step policy must be `sqrt`, `log` or `fixed:<k>` with k >= 1, got `{s}`"
                ))),
            },
        }
    }
}

impl Serialize for StepPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StepPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Final latency goal: `"3.5ms"` is absolute, a bare `"0.5"` is a fraction of
/// the root latency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GoalSpec {
    Absolute(f64),
    Relative(f64),
}

impl GoalSpec {
    pub fn resolve(&self, root_ms: f64) -> f64 {
        match *self {
            GoalSpec::Absolute(ms) => ms,
            GoalSpec::Relative(f) => f * root_ms,
        }
    }
}

impl Default for GoalSpec {
    fn default() -> Self {
        GoalSpec::Relative(0.5)
    }
}

impl fmt::Display for GoalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalSpec::Absolute(ms) => write!(f, "{ms}ms"),
            GoalSpec::Relative(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for GoalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (number, absolute) = match t.strip_suffix("ms") {
            Some(n) => (n.trim(), true),
            None => (t, false),
        };
        let value: f64 = number
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse latency goal `{s}`")))?;
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidArgument(format!("latency goal must be positive, got `{s}`")));
        }
        Ok(if absolute {
            GoalSpec::Absolute(value)
        } else {
            GoalSpec::Relative(value)
        })
    }
}

impl Serialize for GoalSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GoalSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Accept both `0.5` and `"0.5"` / `"3ms"`.
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(x) => x.to_string().parse(),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub steps: usize,
    /// Beam width: children kept per step.
    pub alive: usize,
    pub goal: GoalSpec,
    pub step_policy: StepPolicy,
    pub early_stopping: bool,
    /// Rank children by importance lost since the root instead of since
    /// their parent.
    pub cumulative_filter: bool,
    pub reductions: ReductionConfig,
    pub train: TrainConfig,
    /// Fine-tune alive models during the search and the survivors afterwards.
    pub finetune: bool,
    /// Mini-batches of the final fine-tuning.
    pub final_batches: usize,
    pub min_channels: usize,
    pub seed: u64,
    /// Threads for per-node fine-tuning. Results do not depend on it.
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            alive: 3,
            goal: GoalSpec::default(),
            step_policy: StepPolicy::Sqrt,
            early_stopping: true,
            cumulative_filter: false,
            reductions: ReductionConfig::default(),
            train: TrainConfig::default(),
            finetune: true,
            final_batches: 128,
            min_channels: 1,
            seed: 0,
            workers: 1,
        }
    }
}

impl SearchConfig {
    pub fn check(&self) -> Result<()> {
        if self.steps == 0 || self.alive == 0 || self.min_channels == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "steps, alive, min_channels and workers must all be at least 1".into(),
            ));
        }
        if let StepPolicy::Fixed(0) = self.step_policy {
            return Err(Error::InvalidArgument("fixed step must be at least 1".into()));
        }
        self.train.check()
    }
}

/// Deterministic per-node seed.
pub fn node_seed(run_seed: u64, node: usize, salt: u64) -> u64 {
    let mut z = run_seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.rotate_left(32);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
