use std::io::Read;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{Error, Result};

/// Gaussian class clusters around uniformly drawn centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_features: usize,
    pub n_samples: usize,
    /// Centres are drawn from `[-center_box, center_box]^n_features`.
    #[serde(default = "default_center_box")]
    pub center_box: f64,
    #[serde(default = "default_std")]
    pub cluster_std: f64,
}

fn default_center_box() -> f64 {
    2.0
}

fn default_std() -> f64 {
    1.0
}

impl BlobsConfig {
    pub fn new(seed: u64, n_classes: usize, n_features: usize, n_samples: usize) -> Self {
        Self {
            seed,
            n_classes,
            n_features,
            n_samples,
            center_box: default_center_box(),
            cluster_std: default_std(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticBlobs(BlobsConfig),
    CsvFile { path: PathBuf, label_column: String },
}

/// A set of examples with `features` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut x = Vec::with_capacity(indices.len() * self.features);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.x[i * self.features..(i + 1) * self.features]);
            y.push(self.y[i]);
        }
        Batch::new(x, y)
    }

    /// The whole split as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.x.clone(), self.y.clone())
    }

    fn subset(&self, indices: &[usize]) -> Split {
        let mut x = Vec::with_capacity(indices.len() * self.features);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.x[i * self.features..(i + 1) * self.features]);
            y.push(self.y[i]);
        }
        Split {
            features: self.features,
            x,
            y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub validation: Split,
}

impl Dataset {
    pub fn load(source: &DataSource, val_fraction: f64, split_seed: u64) -> Result<Self> {
        let all = match source {
            DataSource::SyntheticBlobs(cfg) => generate_blobs(cfg)?,
            DataSource::CsvFile { path, label_column } => {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                parse_csv(file, label_column)?
            }
        };
        Self::split(all, val_fraction, split_seed)
    }

    /// Shuffles with `seed` and holds out `val_fraction` of the examples.
    pub fn split(all: Split, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Dataset(format!("validation fraction {val_fraction} not in [0, 1)")));
        }
        if all.is_empty() {
            return Err(Error::Dataset("no examples".into()));
        }
        let classes = all.y.iter().max().map_or(0, |m| m + 1);
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (all.len() as f64 * val_fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        Ok(Self {
            classes,
            train: all.subset(train),
            validation: all.subset(val),
        })
    }
}

pub fn generate_blobs(cfg: &BlobsConfig) -> Result<Split> {
    if cfg.n_classes < 2 || cfg.n_features == 0 || cfg.n_samples == 0 {
        return Err(Error::Dataset(
            "blobs need at least 2 classes, 1 feature and 1 sample".into(),
        ));
    }
    let noise = Normal::new(0.0, cfg.cluster_std)
        .map_err(|e| Error::Dataset(format!("cluster_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            (0..cfg.n_features)
                .map(|_| rng.random_range(-cfg.center_box..=cfg.center_box))
                .collect()
        })
        .collect();
    let mut x = Vec::with_capacity(cfg.n_samples * cfg.n_features);
    let mut y = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let class = i % cfg.n_classes;
        for c in &centers[class] {
            x.push((c + noise.sample(&mut rng)) as f32);
        }
        y.push(class);
    }
    Ok(Split {
        features: cfg.n_features,
        x,
        y,
    })
}

/// Header row required; every column except `label_column` is a numeric
/// feature, labels are non-negative integers.
pub fn parse_csv(reader: impl Read, label_column: &str) -> Result<Split> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Dataset(format!("header: {e}")))?
        .clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Dataset(format!("no column named `{label_column}`")))?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(Error::Dataset("no feature columns".into()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("row {}: {e}", row + 1)))?;
        if record.len() != headers.len() {
            return Err(Error::Dataset(format!(
                "row {} has {} fields, expected {}",
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_at {
                let label: usize = field
                    .parse()
                    .map_err(|_| Error::Dataset(format!("row {}: label `{field}` is not a class index", row + 1)))?;
                y.push(label);
            } else {
                let v: f32 = field
                    .parse()
                    .map_err(|_| Error::Dataset(format!("row {}: `{field}` is not numeric", row + 1)))?;
                if !v.is_finite() {
                    return Err(Error::Dataset(format!("row {}: non-finite feature", row + 1)));
                }
                x.push(v);
            }
        }
    }
    Ok(Split { features, x, y })
}

/// Draws batches by walking seeded permutations of a split, reshuffling at
/// each epoch boundary.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
