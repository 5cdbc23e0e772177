use std::fmt;

use serde::Serialize;

use super::{exploration_step, StepPolicy};
use crate::cache::LatencyCache;
use crate::error::{Error, Result};
use crate::graph::{apply_pruning, build_channel_groups, ModelGraph};
use crate::latency::{BenchmarkProtocol, CountingProvider, LatencyProvider};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// One channel at a time.
    Fine,
    /// Strides of the exploration step.
    Adaptive,
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::Fine => "fine",
            Sweep::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub channels_left: usize,
    pub ms: f64,
    pub sweep: Sweep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyCurve {
    pub points: Vec<CurvePoint>,
    pub fine_calls: usize,
    pub adaptive_calls: usize,
}

/// Channel counts visited by a sweep from `channels` down to 1.
pub fn sweep_counts(channels: usize, stride: usize) -> Vec<usize> {
    let mut counts = vec![channels];
    let mut left = channels;
    while left > 1 {
        left -= stride.min(left - 1);
        counts.push(left);
    }
    counts
}

/// Latency of `model` as one group shrinks, once channel by channel and once
/// in exploration strides. Each sweep has its own cache unless `cache` is
/// given.
pub fn latency_curve(
    model: &ModelGraph,
    group: usize,
    policy: StepPolicy,
    provider: &dyn LatencyProvider,
    cache: Option<&LatencyCache>,
) -> Result<LatencyCurve> {
    let groups = build_channel_groups(model)?;
    let g = groups
        .get(group)
        .ok_or_else(|| Error::InvalidArgument(format!("no channel group {group}")))?;
    if !g.prunable {
        return Err(Error::NotPrunable(group));
    }
    let root = groups.root_signature();
    let channels = g.size;
    let mut points = Vec::new();
    let mut calls = [0usize; 2];
    for (k, (sweep, stride)) in [
        (Sweep::Fine, 1),
        (Sweep::Adaptive, exploration_step(channels, policy)?),
    ]
    .into_iter()
    .enumerate()
    {
        let counting = CountingProvider::new(provider);
        let own = LatencyCache::in_memory("curve");
        let cache = cache.unwrap_or(&own);
        for left in sweep_counts(channels, stride) {
            let signature = root.with(group, left);
            let removed: Vec<usize> = (left..channels).collect();
            let ms = cache.get_or_measure(&counting, &signature, &BenchmarkProtocol::EXPLORATION, || {
                if removed.is_empty() {
                    Ok(model.clone())
                } else {
                    apply_pruning(model, &groups, group, &removed)
                }
            })?;
            points.push(CurvePoint {
                channels_left: left,
                ms,
                sweep,
            });
        }
        calls[k] = counting.calls();
    }
    Ok(LatencyCurve {
        points,
        fine_calls: calls[0],
        adaptive_calls: calls[1],
    })
}
