use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use latprune::cache::{cache_fingerprint, events_path, read_events_csv, write_events_csv, CacheStats, LatencyCache};
use latprune::executor::{evaluate, fine_tune, TrainConfig};
use latprune::graph::{build_channel_groups, load_model, save_model, ModelGraph};
use latprune::importance::{group_importance, ImportanceState};
use latprune::latency::parse_records;
use latprune::search::{latency_curve, run, FixedImportance, GradientTrainer, RunReport, Services, StepPolicy, StepTrainer};
use latprune::toy;
use serde::Serialize;

use crate::manifest::{parse_provider, DataSpec, RunManifest};
use crate::{
    CacheStatsArgs, CurveArgs, Failure, ImportanceExportArgs, ModelArgs, Outcome, PruneArgs, ToyArgs, ToyKind,
    TrainArgs,
};

fn read_model(path: &Path, weights: Option<&Path>) -> Result<ModelGraph, Failure> {
    load_model(path, weights).map_err(|e| match e {
        latprune::Error::Io(io) => Failure::input(format!("cannot read model {}: {io}", path.display())),
        e => e.into(),
    })
}

fn load(args: &ModelArgs) -> Result<ModelGraph, Failure> {
    read_model(&args.model, args.weights.as_deref())
}

pub fn analyze(args: &ModelArgs) -> Outcome {
    let model = load(args)?;
    let groups = build_channel_groups(&model)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{:<6} {:>6} {:<9} members", "group", "size", "prunable")?;
    for g in groups.iter() {
        let members: Vec<String> = g.members.iter().map(ToString::to_string).collect();
        writeln!(
            out,
            "{:<6} {:>6} {:<9} {}",
            g.index,
            g.size,
            if g.prunable { "yes" } else { "no" },
            members.join(" ")
        )?;
    }
    Ok(())
}

/// Written as `report.json`: the effective manifest and what the run did.
#[derive(Serialize)]
struct Report<'a> {
    manifest: &'a RunManifest,
    run: &'a RunReport,
}

pub fn prune(args: &PruneArgs) -> Outcome {
    let manifest = RunManifest::from_args(args)?;
    let config = &manifest.search;
    let model_path = manifest.model.as_deref().expect("checked by the manifest");
    let model = read_model(model_path, manifest.weights.as_deref())?;
    let provider = parse_provider(manifest.provider.as_deref().expect("defaulted"))?.build()?;
    let fingerprint = cache_fingerprint(&model, &*provider)?;
    let cache = match &manifest.cache {
        Some(path) => LatencyCache::open(path, fingerprint)?,
        None => LatencyCache::in_memory(fingerprint),
    };

    let dataset;
    let fixed;
    let gradient;
    let trainer: &dyn StepTrainer = match &manifest.importance {
        Some(path) => {
            let state = ImportanceState::load(path)?;
            let groups = build_channel_groups(&model)?;
            fixed = FixedImportance::new(group_importance(&state, &model, &groups, config.reductions)?);
            &fixed
        }
        None => {
            dataset = manifest.data.load(&model, config.seed)?;
            gradient = GradientTrainer {
                data: &dataset,
                train: config.train.clone(),
                reductions: config.reductions,
                finetune: config.finetune,
                final_batches: config.final_batches,
            };
            &gradient
        }
    };

    let services = Services::new(&*provider, Some(&cache), trainer);
    let outcome = run(&model, config, &services)?;

    let out = manifest.out.as_deref().expect("defaulted");
    fs::create_dir_all(out)?;
    for (k, bundle) in outcome.results.iter().enumerate() {
        save_model(&bundle.model, &out.join(format!("model_{k}.json")), None)?;
    }
    let report = Report {
        manifest: &manifest,
        run: &outcome.report,
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(latprune::Error::from)?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;
    let events = cache.events();
    write_events_csv(&events, BufWriter::new(File::create(out.join("events.csv"))?))?;
    if let Some(path) = cache.path() {
        write_events_csv(&events, BufWriter::new(File::create(events_path(path))?))?;
    }

    let r = &outcome.report;
    let mut o = io::stdout().lock();
    writeln!(o, "root latency {:.6} ms, goal {:.6} ms", r.root.latency_ms, r.goal_ms)?;
    writeln!(
        o,
        "{:<5} {:<24} {:>12} {:>9} {:>10}",
        "rank", "signature", "latency_ms", "accuracy", "params"
    )?;
    for (k, m) in r.results.iter().enumerate() {
        let acc = m.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        writeln!(
            o,
            "{:<5} {:<24} {:>12.6} {:>9} {:>10}",
            k,
            m.signature.to_string(),
            m.latency_ms,
            acc,
            m.parameters
        )?;
    }
    let stats = cache.stats();
    writeln!(
        o,
        "provider calls {}, cache hits {}, misses {}",
        r.provider_calls, stats.hits, stats.misses
    )?;
    Ok(())
}

pub fn curve(args: &CurveArgs) -> Outcome {
    let model = load(&args.model)?;
    let provider = parse_provider(&args.provider)?.build()?;
    let policy: StepPolicy = args.delta.parse()?;
    let curve = latency_curve(&model, args.group, policy, &*provider, None)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for p in &curve.points {
        w.serialize(p).map_err(|e| Failure::from(io::Error::other(e)))?;
    }
    w.flush()?;
    log::info!(
        "provider calls: fine {}, adaptive {}",
        curve.fine_calls,
        curve.adaptive_calls
    );
    Ok(())
}

pub fn cache_stats(args: &CacheStatsArgs) -> Outcome {
    let path = &args.cache;
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let parsed = parse_records(&bytes, path)?;
    let found = parsed.fingerprint.clone().unwrap_or_else(|| "<none>".into());
    if let (Some(model), Some(provider)) = (&args.model, &args.provider) {
        let model = read_model(model, None)?;
        let provider = parse_provider(provider)?.build()?;
        let expected = cache_fingerprint(&model, &*provider)?;
        if expected != found {
            return Err(latprune::Error::FingerprintMismatch {
                path: path.clone(),
                expected,
                found,
            }
            .into());
        }
    }
    let events = match File::open(events_path(path)) {
        Ok(f) => read_events_csv(f)?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let stats = CacheStats::from_events(&events);
    let mut o = io::stdout().lock();
    writeln!(o, "fingerprint {found}")?;
    writeln!(o, "entries {}", parsed.records.len())?;
    writeln!(o, "queries {}", events.len())?;
    writeln!(o, "hits {}", stats.hits)?;
    writeln!(o, "misses {}", stats.misses)?;
    writeln!(o, "hit_rate {:.6}", stats.hit_rate)?;
    writeln!(o)?;
    write_events_csv(&events, &mut o)?;
    Ok(())
}

fn parse_dims(s: &str) -> Result<Vec<usize>, Failure> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Failure::input(format!("bad input shape `{s}`")))
}

pub fn toy(args: &ToyArgs) -> Outcome {
    let dims = parse_dims(&args.input)?;
    let image = || -> Result<[usize; 3], Failure> {
        <[usize; 3]>::try_from(dims.as_slice()).map_err(|_| Failure::input("conv models need an input of the form CxHxW"))
    };
    if args.hidden.contains(&0) || args.classes < 2 {
        return Err(Failure::input("widths must be positive and classes at least 2"));
    }
    let model = match args.kind {
        ToyKind::Mlp => match dims.as_slice() {
            [features] => toy::mlp(*features, &args.hidden, args.classes, args.seed),
            _ => return Err(Failure::input("an mlp takes a single input size")),
        },
        ToyKind::Conv => toy::conv_net(image()?, &args.hidden, args.classes, args.seed),
        ToyKind::Residual => match args.hidden.as_slice() {
            &[stem, mid, block] => toy::residual_net(image()?, stem, mid, block, args.classes, args.seed),
            _ => return Err(Failure::input("a residual model takes --hidden stem,mid,block")),
        },
    };
    save_model(&model, &args.out, None)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

pub fn train(args: &TrainArgs) -> Outcome {
    let mut model = load(&args.model)?;
    let data = DataSpec::from_args(&args.data).load(&model, args.seed)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        batches_per_step: args.batches,
        seed: args.seed,
    };
    cfg.check()?;
    let loss = fine_tune(&mut model, &data.train, &cfg, args.batches, args.seed, true, |_, _| Ok(()))?;
    let acc = if data.validation.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.validation)?)
    };
    ensure_parent(&args.out)?;
    save_model(&model, &args.out, None)?;
    match acc {
        Some(a) => println!("mean training loss {loss:.6}, validation accuracy {a:.4}"),
        None => println!("mean training loss {loss:.6}"),
    }
    Ok(())
}

pub fn importance_export(args: &ImportanceExportArgs) -> Outcome {
    let mut model = load(&args.model)?;
    let data = DataSpec::from_args(&args.data).load(&model, args.seed)?;
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        ..TrainConfig::default()
    };
    cfg.check()?;
    let mut state = ImportanceState::new(&model);
    fine_tune(&mut model, &data.train, &cfg, args.batches, args.seed, false, |m, g| {
        state.accumulate(m, g)
    })?;
    ensure_parent(&args.out)?;
    state.save(&args.out)?;
    println!("{} batches accumulated", state.batches());
    Ok(())
}
