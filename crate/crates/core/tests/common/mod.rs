#![allow(dead_code)]

pub mod gradcheck;

use std::collections::{BTreeMap, BTreeSet};

use latprune::cache::LatencyCache;
use latprune::executor::{GradientStore, BlobsConfig, DataSource, Dataset, TrainConfig};
use latprune::graph::{build_channel_groups, ModelGraph, Port, Signature};
use latprune::importance::{GroupImportance, ImportanceState};
use latprune::latency::{AnalyticalParams, LatencyProvider, ReplayProvider, ReplayTable};
use latprune::search::{exploration_step, latency_schedule, run, FixedImportance, GradientTrainer, RunOutcome, SearchConfig, Services, StepPolicy};
use latprune::toy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random MLP: 4-12 inputs, `hidden` layers of 4-16 units, 2-4 classes.
pub fn random_mlp(rng: &mut ChaCha8Rng, hidden: usize) -> ModelGraph {
    let inputs = rng.random_range(4..=12);
    let widths: Vec<usize> = (0..hidden).map(|_| rng.random_range(4..=16)).collect();
    let classes = rng.random_range(2..=4);
    toy::mlp(inputs, &widths, classes, rng.random())
}

/// Random positive importance per group; occasionally with repeated values.
pub fn random_importance(model: &ModelGraph, rng: &mut ChaCha8Rng) -> GroupImportance {
    let groups = build_channel_groups(model).unwrap();
    let per_group = groups
        .iter()
        .map(|g| {
            (0..g.size)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        0.5
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    GroupImportance { per_group }
}

/// Analytical latency of an MLP written directly from its signature:
/// layer `j` maps group `j` to group `j + 1`.
pub fn mlp_latency(signature: &[usize], p: &AnalyticalParams) -> f64 {
    let a = p.align as f64;
    let mut total = p.base;
    for w in signature.windows(2) {
        let (i, o) = (w[0], w[1]);
        let aligned = a * a * (o.div_ceil(p.align) as f64) * (i.div_ceil(p.align) as f64);
        let work = (p.slant * o as f64 * i as f64 + (1.0 - p.slant) * aligned) * 1.0;
        total += p.layer_overhead + p.dense_cost * work;
    }
    total
}

/// A random latency that is strictly increasing in every signature
/// component, tabulated over the whole signature space.
pub fn random_monotone_table(root: &Signature, rng: &mut ChaCha8Rng) -> ReplayTable {
    let per_group: Vec<Vec<f64>> = root
        .counts()
        .iter()
        .map(|&c| {
            let mut acc = 0.0;
            (0..=c)
                .map(|_| {
                    acc += rng.random_range(0.05..1.0);
                    acc
                })
                .collect()
        })
        .collect();
    let mut entries = Vec::new();
    let mut counts = vec![1usize; root.len()];
    loop {
        let ms: f64 = 1.0 + counts.iter().zip(&per_group).map(|(&c, f)| f[c]).sum::<f64>();
        entries.push((Signature::new(counts.clone()), ms));
        let mut k = 0;
        loop {
            if k == counts.len() {
                return ReplayTable::from_records(entries);
            }
            if counts[k] < root.get(k) {
                counts[k] += 1;
                break;
            }
            counts[k] = 1;
            k += 1;
        }
    }
}

pub fn replay(table: ReplayTable) -> ReplayProvider {
    ReplayProvider::new(table)
}

pub fn no_finetune(cfg: SearchConfig) -> SearchConfig {
    SearchConfig { finetune: false, ..cfg }
}

pub fn search_config(steps: usize, alive: usize, goal: f64, seed: u64) -> SearchConfig {
    SearchConfig {
        steps,
        alive,
        goal: latprune::search::GoalSpec::Relative(goal),
        step_policy: StepPolicy::Sqrt,
        seed,
        train: TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            batches_per_step: 4,
            seed,
        },
        final_batches: 8,
        ..SearchConfig::default()
    }
}

pub fn run_fixed(
    model: &ModelGraph,
    importance: GroupImportance,
    provider: &dyn LatencyProvider,
    cache: Option<&LatencyCache>,
    cfg: &SearchConfig,
) -> latprune::Result<RunOutcome> {
    let trainer = FixedImportance::new(importance);
    let services = Services::new(provider, cache, &trainer);
    run(model, cfg, &services)
}

pub fn blobs_for(model: &ModelGraph, seed: u64, samples: usize) -> Dataset {
    let shapes = model.infer_shapes().unwrap();
    let features = shapes["input"].numel();
    let out = model.output_layer().unwrap().inputs[0].clone();
    let classes = shapes[&out].numel();
    Dataset::load(
        &DataSource::SyntheticBlobs(BlobsConfig::new(seed, classes, features, samples)),
        0.25,
        seed,
    )
    .unwrap()
}

pub fn run_gradient(
    model: &ModelGraph,
    data: &Dataset,
    provider: &dyn LatencyProvider,
    cache: Option<&LatencyCache>,
    cfg: &SearchConfig,
) -> latprune::Result<RunOutcome> {
    let trainer = GradientTrainer {
        data,
        train: cfg.train.clone(),
        reductions: cfg.reductions,
        finetune: cfg.finetune,
        final_batches: cfg.final_batches,
    };
    let services = Services::new(provider, cache, &trainer);
    run(model, cfg, &services)
}

/// Alive signatures and per-step losses after each step.
pub fn alive_trace(outcome: &RunOutcome) -> Vec<Vec<(Signature, u64)>> {
    outcome
        .report
        .steps
        .iter()
        .map(|s| s.alive.iter().map(|a| (a.signature.clone(), a.delta.to_bits())).collect())
        .collect()
}

/// Importance lost since the root for a signature under fixed importance:
/// each group keeps its most important channels.
pub fn cumulative_loss(signature: &Signature, importance: &GroupImportance) -> f64 {
    let mut total = 0.0;
    for (n, imp) in importance.per_group.iter().enumerate() {
        let removed = imp.len() - signature.get(n);
        let order = latprune::importance::removal_order(imp);
        total += order[..removed].iter().map(|&c| imp[c]).sum::<f64>();
    }
    total
}

pub fn count_by<T: Ord + Clone>(items: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i.clone()).or_insert(0) += 1;
    }
    m
}

/// All signatures reachable by the blossom rule, level by level, excluding
/// signatures seen at earlier levels.
pub fn reachable_levels(
    root: &Signature,
    prunable: &[bool],
    latency: &dyn Fn(&Signature) -> f64,
    steps: usize,
    goal_fraction: f64,
) -> Option<BTreeSet<Signature>> {
    let tau0 = latency(root);
    let goal = goal_fraction * tau0;
    let mut seen: BTreeSet<Signature> = BTreeSet::from([root.clone()]);
    let mut level: BTreeSet<Signature> = seen.clone();
    for i in 1..=steps {
        let tau = latency_schedule(tau0, goal, steps, i).unwrap();
        let mut next = BTreeSet::new();
        for sig in &level {
            for n in (0..sig.len()).filter(|&n| prunable[n]) {
                let c = sig.get(n);
                let stride = exploration_step(c, StepPolicy::Sqrt).unwrap();
                let mut left = c;
                while left > 1 {
                    left -= stride.min(left - 1);
                    let child = sig.with(n, left);
                    if latency(&child) <= tau {
                        if !seen.contains(&child) {
                            next.insert(child);
                        }
                        break;
                    }
                }
            }
        }
        if next.is_empty() {
            return None;
        }
        seen.extend(next.iter().cloned());
        level = next;
    }
    Some(level)
}

pub fn random_state(model: &ModelGraph, seed: u64) -> ImportanceState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ImportanceState::new(model);
    for _ in 0..3 {
        let mut grads = GradientStore::default();
        for layer in model.layers.iter().filter(|l| l.kind.is_parametric()) {
            for name in layer.weight_names() {
                let n = model.tensor(name).unwrap().data.len();
                grads.insert(name, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
            }
        }
        state.accumulate(model, &grads).unwrap();
    }
    state
}

/// Per channel, the sum of every importance entry touching that channel in
/// every member tensor.
pub fn direct_group_sums(model: &ModelGraph, state: &ImportanceState) -> Vec<Vec<f64>> {
    let groups = build_channel_groups(model).unwrap();
    groups
        .iter()
        .map(|g| {
            let mut sums = vec![0.0; g.size];
            for m in &g.members {
                let (shape, values) = state.layer(&m.layer).unwrap();
                let (o, i) = (shape[0], shape[1]);
                let k: usize = shape[2..].iter().product();
                for a in 0..o {
                    for b in 0..i {
                        for s in 0..k {
                            let v = values[(a * i + b) * k + s];
                            match m.port {
                                Port::Output => sums[a] += v,
                                Port::Input => sums[b] += v,
                            }
                        }
                    }
                }
            }
            sums
        })
        .collect()
}
