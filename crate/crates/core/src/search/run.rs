use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use super::tree::{Node, Tree};
use super::{exploration_step, latency_schedule, node_seed, SearchConfig, StepPolicy, StepTrainer};
use crate::cache::{CacheStats, LatencyCache};
use crate::error::{Error, Result};
use crate::graph::{apply_pruning, build_channel_groups, signature_of, ChannelGroups, ModelGraph, Signature};
use crate::importance::removal_order;
use crate::latency::{BenchmarkProtocol, CountingProvider, LatencyProvider};

const FINAL_SALT: u64 = u64::MAX;

/// Latency measurement and training backends for a search.
pub struct Services<'a> {
    provider: CountingProvider<'a>,
    cache: Option<&'a LatencyCache>,
    trainer: &'a dyn StepTrainer,
}

impl<'a> Services<'a> {
    /// Without a cache every probe goes to the provider.
    pub fn new(provider: &'a dyn LatencyProvider, cache: Option<&'a LatencyCache>, trainer: &'a dyn StepTrainer) -> Self {
        Self {
            provider: CountingProvider::new(provider),
            cache,
            trainer,
        }
    }

    /// Provider calls made through these services so far.
    pub fn provider_calls(&self) -> usize {
        self.provider.calls()
    }

    pub fn cache(&self) -> Option<&LatencyCache> {
        self.cache
    }

    /// Exploration-grade measurement, through the cache when present.
    pub fn explore(&self, signature: &Signature, model: impl FnOnce() -> Result<ModelGraph>) -> Result<f64> {
        let protocol = BenchmarkProtocol::EXPLORATION;
        match self.cache {
            Some(cache) => cache.get_or_measure(&self.provider, signature, &protocol, model),
            None => {
                let built = if self.provider.needs_model() { model()? } else { ModelGraph::default() };
                self.provider.measure(&built, signature, &protocol)
            }
        }
    }

    /// Final-grade measurement, never cached.
    pub fn benchmark(&self, model: &ModelGraph, signature: &Signature) -> Result<f64> {
        self.provider.measure(model, signature, &BenchmarkProtocol::FINAL)
    }
}

/// One child-generation attempt on one channel group.
pub struct BlossomRequest<'a> {
    pub model: &'a ModelGraph,
    pub groups: &'a ChannelGroups,
    pub signature: &'a Signature,
    pub group: usize,
    pub goal_ms: f64,
    /// Importance of the parent's channels in `group`.
    pub importance: &'a [f64],
    pub policy: StepPolicy,
    pub min_channels: usize,
    /// Give up once `score_offset + lost importance` exceeds this.
    pub threshold: Option<f64>,
    pub score_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlossomOutcome {
    Child {
        signature: Signature,
        /// Parent-local channel indices removed, ascending.
        removed: Vec<usize>,
        delta: f64,
        latency: f64,
        probes: usize,
    },
    /// The minimum channel count was reached without meeting the goal.
    NoChild { probes: usize },
    EarlyStopped { delta: f64, probes: usize },
}

impl BlossomOutcome {
    pub fn probes(&self) -> usize {
        match self {
            BlossomOutcome::Child { probes, .. }
            | BlossomOutcome::NoChild { probes }
            | BlossomOutcome::EarlyStopped { probes, .. } => *probes,
        }
    }
}

/// Removes the least important channels of one group, one stride at a time,
/// until the measured latency meets the goal. The stride is fixed from the
/// group's channel count when the attempt starts; the last stride is clamped
/// so `min_channels` survive.
pub fn blossom(req: &BlossomRequest<'_>, services: &Services<'_>) -> Result<BlossomOutcome> {
    let n = req.group;
    let group = req
        .groups
        .get(n)
        .ok_or_else(|| Error::InvalidPruning(format!("no channel group {n}")))?;
    if !group.prunable {
        return Err(Error::NotPrunable(n));
    }
    let channels = req.signature.get(n);
    if req.importance.len() != channels {
        return Err(Error::Shape(format!(
            "group {n} has {channels} channels but {} importance values",
            req.importance.len()
        )));
    }
    let stride = exploration_step(channels, req.policy)?;
    let order = removal_order(req.importance);
    let floor = req.min_channels.max(1);
    let mut removed = 0usize;
    let mut delta = 0.0f64;
    let mut probes = 0usize;
    while channels > floor + removed {
        let k = stride.min(channels - floor - removed);
        delta += order[removed..removed + k].iter().map(|&c| req.importance[c]).sum::<f64>();
        removed += k;
        if let Some(limit) = req.threshold {
            if req.score_offset + delta > limit {
                return Ok(BlossomOutcome::EarlyStopped { delta, probes });
            }
        }
        let signature = req.signature.with(n, channels - removed);
        let mut chosen = order[..removed].to_vec();
        chosen.sort_unstable();
        probes += 1;
        let latency = services.explore(&signature, || apply_pruning(req.model, req.groups, n, &chosen))?;
        if latency <= req.goal_ms {
            return Ok(BlossomOutcome::Child {
                signature,
                removed: chosen,
                delta,
                latency,
                probes,
            });
        }
    }
    Ok(BlossomOutcome::NoChild { probes })
}

#[derive(Clone, Debug, Serialize)]
pub struct AliveEntry {
    pub node: usize,
    pub parent: Option<usize>,
    pub signature: Signature,
    pub delta: f64,
    pub cumulative: f64,
    pub latency_ms: f64,
}

impl AliveEntry {
    fn of(node: &Node) -> Self {
        Self {
            node: node.id,
            parent: node.parent,
            signature: node.signature.clone(),
            delta: node.delta,
            cumulative: node.cumulative,
            latency_ms: node.latency,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub goal_ms: f64,
    pub parents: usize,
    /// Unique new children competing in the filter.
    pub candidates: usize,
    /// Children dropped because their signature was already present.
    pub duplicates: usize,
    pub early_stops: usize,
    pub no_child: usize,
    /// Latency queries, cached or not.
    pub probes: usize,
    /// Of which reached the provider.
    pub provider_calls: usize,
    pub importance_batches: usize,
    pub alive: Vec<AliveEntry>,
    /// Cumulative since the cache was opened.
    pub cache: Option<CacheStats>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSummary {
    pub node: usize,
    pub signature: Signature,
    pub latency_ms: f64,
    pub accuracy: Option<f64>,
    pub parameters: usize,
    pub cumulative_delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: SearchConfig,
    pub provider: String,
    pub root: ModelSummary,
    pub goal_ms: f64,
    pub steps: Vec<StepReport>,
    pub results: Vec<ModelSummary>,
    pub provider_calls: usize,
    pub cache: Option<CacheStats>,
    pub warnings: Vec<String>,
}

pub struct ResultBundle {
    pub model: ModelGraph,
    pub summary: ModelSummary,
}

pub struct RunOutcome {
    pub report: RunReport,
    /// Sorted by validation accuracy, best first.
    pub results: Vec<ResultBundle>,
    pub tree: Tree,
}

struct Candidate {
    parent: usize,
    group: usize,
    signature: Signature,
    removed: Vec<usize>,
    delta: f64,
    score: f64,
    latency: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then_with(|| a.signature.cmp(&b.signature))
}

/// Score of the `alive`-th best candidate once there are that many.
fn kept_threshold(candidates: &[Candidate], alive: usize) -> Option<f64> {
    if candidates.len() < alive {
        return None;
    }
    let mut scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    scores.sort_by(f64::total_cmp);
    Some(scores[alive - 1])
}

/// Runs the full search on `model`.
pub fn run(model: &ModelGraph, config: &SearchConfig, services: &Services<'_>) -> Result<RunOutcome> {
    config.check()?;
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations));
    }
    let groups = build_channel_groups(model)?;
    let root_signature = signature_of(model, &groups);
    let root_ms = services.benchmark(model, &root_signature)?;
    let goal_ms = config.goal.resolve(root_ms);
    let root_summary = ModelSummary {
        node: 0,
        signature: root_signature.clone(),
        latency_ms: root_ms,
        accuracy: services.trainer.accuracy(model)?,
        parameters: model.parameter_count(),
        cumulative_delta: 0.0,
    };
    let mut report = RunReport {
        config: config.clone(),
        provider: services.provider.fingerprint(),
        root: root_summary.clone(),
        goal_ms,
        steps: Vec::new(),
        results: Vec::new(),
        provider_calls: 0,
        cache: None,
        warnings: Vec::new(),
    };
    let mut tree = Tree::with_root(model.clone(), root_signature, root_ms);

    if goal_ms >= root_ms {
        let warning = format!(
            "latency goal {goal_ms:.6} ms is not below the root latency {root_ms:.6} ms; returning the root model"
        );
        log::warn!("{warning}");
        report.warnings.push(warning);
        report.results.push(root_summary.clone());
        report.provider_calls = services.provider_calls();
        report.cache = services.cache.map(LatencyCache::stats);
        return Ok(RunOutcome {
            report,
            results: vec![ResultBundle {
                model: model.clone(),
                summary: root_summary,
            }],
            tree,
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;

    for step in 1..=config.steps {
        let step_goal = latency_schedule(root_ms, goal_ms, config.steps, step)?;
        let report_step = prune_step(&mut tree, &groups, step, step_goal, config, services, &pool)?;
        log::info!(
            "step {step}: goal {step_goal:.6} ms, {} candidates, {} alive, {} provider calls",
            report_step.candidates,
            report_step.alive.len(),
            report_step.provider_calls
        );
        report.steps.push(report_step);
    }

    let survivors: Vec<usize> = tree.alive().to_vec();
    let finished: Vec<(usize, ModelGraph, Option<f64>)> = pool.install(|| {
        survivors
            .par_iter()
            .map(|&id| {
                let mut m = tree.node(id).model.clone().expect("alive nodes keep their model");
                let acc = services.trainer.finish(&mut m, node_seed(config.seed, id, FINAL_SALT))?;
                Ok((id, m, acc))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut results = Vec::with_capacity(finished.len());
    for (id, m, accuracy) in finished {
        let node = tree.node(id);
        let latency_ms = services.benchmark(&m, &node.signature)?;
        results.push(ResultBundle {
            summary: ModelSummary {
                node: id,
                signature: node.signature.clone(),
                latency_ms,
                accuracy,
                parameters: m.parameter_count(),
                cumulative_delta: node.cumulative,
            },
            model: m,
        });
    }
    results.sort_by(|a, b| {
        let (a, b) = (&a.summary, &b.summary);
        let acc = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
        acc(b.accuracy)
            .total_cmp(&acc(a.accuracy))
            .then_with(|| a.cumulative_delta.total_cmp(&b.cumulative_delta))
            .then_with(|| a.signature.cmp(&b.signature))
    });
    report.results = results.iter().map(|r| r.summary.clone()).collect();
    report.provider_calls = services.provider_calls();
    report.cache = services.cache.map(LatencyCache::stats);
    Ok(RunOutcome { report, results, tree })
}

fn prune_step(
    tree: &mut Tree,
    groups: &ChannelGroups,
    step: usize,
    goal_ms: f64,
    config: &SearchConfig,
    services: &Services<'_>,
    pool: &rayon::ThreadPool,
) -> Result<StepReport> {
    let calls_before = services.provider_calls();
    let parents: Vec<usize> = tree.alive().to_vec();
    let trained = {
        let tree = &*tree;
        pool.install(|| {
            parents
                .par_iter()
                .map(|&id| {
                    let node = tree.node(id);
                    let model = node.model.as_ref().expect("alive nodes keep their model");
                    services
                        .trainer
                        .step(model, groups, &node.kept, node.parent.is_none(), node_seed(config.seed, id, step as u64))
                })
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut out = StepReport {
        step,
        goal_ms,
        parents: parents.len(),
        ..StepReport::default()
    };
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut by_signature: HashMap<Signature, usize> = HashMap::new();
    for (&parent_id, training) in parents.iter().zip(&trained) {
        out.importance_batches += training.batches;
        let parent = tree.node(parent_id);
        let offset = if config.cumulative_filter { parent.cumulative } else { 0.0 };
        for group in groups.prunable() {
            let n = group.index;
            let threshold = if config.early_stopping {
                kept_threshold(&candidates, config.alive)
            } else {
                None
            };
            let outcome = blossom(
                &BlossomRequest {
                    model: &training.model,
                    groups,
                    signature: &parent.signature,
                    group: n,
                    goal_ms,
                    importance: training.importance.group(n),
                    policy: config.step_policy,
                    min_channels: config.min_channels,
                    threshold,
                    score_offset: offset,
                },
                services,
            )?;
            out.probes += outcome.probes();
            match outcome {
                BlossomOutcome::NoChild { .. } => out.no_child += 1,
                BlossomOutcome::EarlyStopped { .. } => out.early_stops += 1,
                BlossomOutcome::Child {
                    signature,
                    removed,
                    delta,
                    latency,
                    ..
                } => {
                    if tree.contains(&signature) {
                        out.duplicates += 1;
                        continue;
                    }
                    let candidate = Candidate {
                        parent: parent_id,
                        group: n,
                        signature,
                        removed,
                        delta,
                        score: offset + delta,
                        latency,
                    };
                    match by_signature.get(&candidate.signature) {
                        Some(&k) => {
                            out.duplicates += 1;
                            if candidate.score < candidates[k].score {
                                candidates[k] = candidate;
                            }
                        }
                        None => {
                            by_signature.insert(candidate.signature.clone(), candidates.len());
                            candidates.push(candidate);
                        }
                    }
                }
            }
        }
    }
    out.candidates = candidates.len();
    if candidates.is_empty() {
        return Err(Error::Infeasible { step });
    }

    let parent_models: HashMap<usize, (ModelGraph, Vec<Vec<usize>>, f64)> = parents
        .iter()
        .zip(trained)
        .map(|(&id, t)| {
            let node = tree.node(id);
            (id, (t.model, node.kept.clone(), node.cumulative))
        })
        .collect();
    for &id in &parents {
        tree.kill(id);
    }
    candidates.sort_by(rank);
    candidates.truncate(config.alive);
    for c in candidates {
        let (parent_model, parent_kept, parent_cumulative) = &parent_models[&c.parent];
        let model = apply_pruning(parent_model, groups, c.group, &c.removed)?;
        let mut kept = parent_kept.clone();
        let removed_root: Vec<usize> = c.removed.iter().map(|&j| parent_kept[c.group][j]).collect();
        kept[c.group].retain(|ch| !removed_root.contains(ch));
        let id = tree.admit(Node {
            id: 0,
            parent: Some(c.parent),
            step,
            signature: c.signature,
            kept,
            delta: c.delta,
            cumulative: parent_cumulative + c.delta,
            latency: c.latency,
            alive: true,
            model: Some(model),
        });
        debug_assert!(id.is_some(), "candidates are unique and new");
    }
    out.alive = tree.alive().iter().map(|&id| AliveEntry::of(tree.node(id))).collect();
    out.provider_calls = services.provider_calls() - calls_before;
    out.cache = services.cache.map(LatencyCache::stats);
    Ok(out)
}
