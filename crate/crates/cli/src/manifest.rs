use std::path::{Path, PathBuf};

use latprune::executor::{BlobsConfig, DataSource, Dataset};
use latprune::graph::{LayerKind, ModelGraph};
use latprune::latency::ProviderSpec;
use latprune::search::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::{DataArgs, Failure, PruneArgs};

const DEFAULT_SAMPLES: usize = 1024;
const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Where training and validation examples come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Synthetic blobs shaped like the model when absent.
    pub source: Option<DataSource>,
    /// Size of the default synthetic dataset.
    pub samples: Option<usize>,
    pub val_fraction: Option<f64>,
}

impl DataSpec {
    pub fn from_args(args: &DataArgs) -> Self {
        let mut spec = Self::default();
        spec.apply(args);
        spec
    }

    fn apply(&mut self, args: &DataArgs) {
        if let Some(path) = &args.data {
            self.source = Some(DataSource::CsvFile {
                path: path.clone(),
                label_column: args.label_column.clone().unwrap_or_else(|| "label".into()),
            });
        } else if let (Some(label), Some(DataSource::CsvFile { label_column, .. })) =
            (&args.label_column, &mut self.source)
        {
            *label_column = label.clone();
        }
        if args.samples.is_some() {
            self.samples = args.samples;
        }
        if args.val_fraction.is_some() {
            self.val_fraction = args.val_fraction;
        }
    }

    /// Loads the dataset; default blobs take their shape from `model` and
    /// their seed from `seed`.
    pub fn load(&self, model: &ModelGraph, seed: u64) -> Result<Dataset, Failure> {
        let source = match &self.source {
            Some(s) => s.clone(),
            None => {
                let (features, classes) = model_io(model)?;
                DataSource::SyntheticBlobs(BlobsConfig::new(
                    seed,
                    classes,
                    features,
                    self.samples.unwrap_or(DEFAULT_SAMPLES),
                ))
            }
        };
        Ok(Dataset::load(
            &source,
            self.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION),
            seed,
        )?)
    }
}

/// Input features and output classes of a model.
fn model_io(model: &ModelGraph) -> Result<(usize, usize), Failure> {
    let shapes = model.infer_shapes().map_err(latprune::Error::InvalidModel)?;
    let input = model
        .input_layer()
        .ok_or_else(|| Failure::input("model has no input layer"))?;
    let LayerKind::Input { shape } = &input.kind else {
        unreachable!("input_layer returns an Input layer")
    };
    let output = model
        .output_layer()
        .and_then(|l| shapes.get(&l.id))
        .ok_or_else(|| Failure::input("model has no output layer"))?;
    Ok((shape.iter().product(), output.numel()))
}

/// Everything a pruning run needs. Paths in a manifest file are relative to
/// the file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub model: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub provider: Option<String>,
    pub cache: Option<PathBuf>,
    /// Precomputed importance instead of gradients from the dataset.
    pub importance: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub data: DataSpec,
}

impl RunManifest {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut m: Self = toml::from_str(text).map_err(|e| Failure::input(format!("run manifest: {e}")))?;
        m.rebase(base)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    fn rebase(&mut self, base: &Path) -> Result<(), Failure> {
        let join = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        join(&mut self.model);
        join(&mut self.weights);
        join(&mut self.cache);
        join(&mut self.importance);
        join(&mut self.out);
        if let Some(DataSource::CsvFile { path, .. }) = &mut self.data.source {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(spec) = &self.provider {
            if let ProviderSpec::Replay(p) = parse_provider(spec)? {
                if p.is_relative() {
                    self.provider = Some(ProviderSpec::Replay(base.join(p)).to_string());
                }
            }
        }
        Ok(())
    }

    /// The manifest named by `--manifest`, if any, with flags applied on top.
    pub fn from_args(args: &PruneArgs) -> Result<Self, Failure> {
        let mut m = match &args.manifest {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut m.model, &args.model);
        set(&mut m.weights, &args.weights);
        set(&mut m.cache, &args.cache);
        set(&mut m.importance, &args.importance);
        set(&mut m.out, &args.out);
        if args.provider.is_some() {
            m.provider.clone_from(&args.provider);
        }
        let s = &mut m.search;
        if let Some(goal) = &args.goal {
            s.goal = goal.parse()?;
        }
        if let Some(delta) = &args.delta {
            s.step_policy = delta.parse()?;
        }
        if let Some(r) = &args.reductions {
            s.reductions = r.parse()?;
        }
        s.steps = args.steps.unwrap_or(s.steps);
        s.alive = args.alive.unwrap_or(s.alive);
        s.seed = args.seed.unwrap_or(s.seed);
        s.workers = args.workers.unwrap_or(s.workers);
        s.early_stopping &= !args.no_early_stop;
        s.finetune &= !args.no_finetune;
        m.data.apply(&args.data);
        m.provider.get_or_insert_with(|| "analytical".into());
        m.out.get_or_insert_with(|| PathBuf::from("latprune-out"));
        m.check()?;
        Ok(m)
    }

    /// Referenced inputs exist and the settings are consistent.
    pub fn check(&self) -> Result<(), Failure> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Failure::input("no model given; pass --model or set `model` in the manifest"))?;
        let mut inputs = vec![model];
        inputs.extend(&self.weights);
        inputs.extend(&self.importance);
        if let Some(DataSource::CsvFile { path, .. }) = &self.data.source {
            inputs.push(path);
        }
        let replay = match &self.provider {
            Some(spec) => match parse_provider(spec)? {
                ProviderSpec::Replay(p) => Some(p),
                _ => None,
            },
            None => None,
        };
        inputs.extend(&replay);
        for p in inputs {
            if !p.is_file() {
                return Err(Failure::input(format!("{}: no such file", p.display())));
            }
        }
        if self.importance.is_some() && self.search.finetune {
            return Err(Failure::input(
                "an importance file fixes the weights; combine it with --no-finetune",
            ));
        }
        self.search.check()?;
        Ok(())
    }
}

pub fn parse_provider(spec: &str) -> Result<ProviderSpec, Failure> {
    Ok(spec.parse::<ProviderSpec>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_relative_to_the_manifest() {
        let m = RunManifest::from_toml(
            "model = \"m.json\"\nprovider = \"replay:t.jsonl\"\nout = \"/abs\"\n\
             [search]\nsteps = 2\ngoal = \"3ms\"\n[data.source]\nkind = \"csv-file\"\npath = \"d.csv\"\nlabel_column = \"y\"\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(m.model.as_deref(), Some(Path::new("/base/m.json")));
        assert_eq!(m.provider.as_deref(), Some("replay:/base/t.jsonl"));
        assert_eq!(m.out.as_deref(), Some(Path::new("/abs")));
        assert_eq!(m.search.steps, 2);
        assert!(matches!(&m.data.source, Some(DataSource::CsvFile { path, .. }) if path == Path::new("/base/d.csv")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunManifest::from_toml("modle = \"m.json\"\n", Path::new(".")).is_err());
        assert!(RunManifest::from_toml("[search]\nbeam = 3\n", Path::new(".")).is_err());
    }

    #[test]
    fn flags_override_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), "{}").unwrap();
        let manifest = dir.path().join("run.toml");
        std::fs::write(&manifest, "model = \"m.json\"\n[search]\nalive = 5\nseed = 9\n").unwrap();
        let args = PruneArgs {
            manifest: Some(manifest),
            alive: Some(2),
            no_early_stop: true,
            ..PruneArgs::default()
        };
        let m = RunManifest::from_args(&args).unwrap();
        assert_eq!((m.search.alive, m.search.seed, m.search.early_stopping), (2, 9, false));
        assert_eq!(m.provider.as_deref(), Some("analytical"));
    }

    #[test]
    fn missing_inputs_are_input_errors() {
        let args = PruneArgs {
            model: Some("/nonexistent/model.json".into()),
            ..PruneArgs::default()
        };
        assert_eq!(RunManifest::from_args(&args).unwrap_err().code, crate::exit::INPUT);
    }
}
