//! Gradient-based channel importance.
//!
//! Per-weight importance is `|W * dL/dW|` summed over fine-tuning batches.
//! It is reduced to one vector per channel group in three stages: over the
//! kernel's spatial positions, over the opposite channel axis of each layer,
//! and across the member ports of a group.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::GradientStore;
use crate::graph::{decode_tensors, encode_tensors, ChannelGroups, LayerKind, ModelGraph, Port, TensorIndexEntry, TensorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
    #[serde(alias = "max")]
    LInf,
}

impl Reduction {
    pub const ALL: [Reduction; 3] = [Reduction::Sum, Reduction::Mean, Reduction::LInf];

    /// Reduces non-negative values; an empty input reduces to 0.
    pub fn reduce(self, values: impl IntoIterator<Item = f64>) -> f64 {
        let mut n = 0usize;
        let mut acc = 0.0f64;
        for v in values {
            n += 1;
            match self {
                Reduction::Sum | Reduction::Mean => acc += v,
                Reduction::LInf => acc = acc.max(v.abs()),
            }
        }
        match self {
            Reduction::Mean if n > 0 => acc / n as f64,
            _ => acc,
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
            Reduction::LInf => "linf",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            "linf" | "max" => Ok(Reduction::LInf),
            other => Err(Error::InvalidArgument(format!("unknown reduction `{other}`"))),
        }
    }
}

/// Spatial, neural and channel-group reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub spatial: Reduction,
    pub neural: Reduction,
    pub channel: Reduction,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            spatial: Reduction::Sum,
            neural: Reduction::LInf,
            channel: Reduction::Sum,
        }
    }
}

impl FromStr for ReductionConfig {
    type Err = Error;

    /// `"sum,linf,sum"`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        let [spatial, neural, channel] = parts.as_slice() else {
            return Err(Error::InvalidArgument(format!(
                "expected three comma-separated reductions, got `{s}`"
            )));
        };
        Ok(Self {
            spatial: spatial.parse()?,
            neural: neural.parse()?,
            channel: channel.parse()?,
        })
    }
}

impl fmt::Display for ReductionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.spatial, self.neural, self.channel)
    }
}

/// Accumulated per-weight importance for every Dense/Conv2d layer, keyed by
/// layer id and shaped like the layer's weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceState {
    per_layer: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    batches: usize,
}

impl ImportanceState {
    pub fn new(model: &ModelGraph) -> Self {
        let mut per_layer = BTreeMap::new();
        for layer in model.layers.iter().filter(|l| l.kind.is_parametric()) {
            if let Some(w) = layer.weight.as_deref().and_then(|n| model.tensor(n)) {
                per_layer.insert(layer.id.clone(), (w.shape.clone(), vec![0.0; w.data.len()]));
            }
        }
        Self { per_layer, batches: 0 }
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn layer(&self, id: &str) -> Option<(&[usize], &[f64])> {
        self.per_layer.get(id).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.per_layer
            .iter()
            .map(|(k, (s, v))| (k.as_str(), s.as_slice(), v.as_slice()))
    }

    /// Adds `|W * g|` for one batch's mean-loss gradient. Biases are ignored.
    pub fn accumulate(&mut self, model: &ModelGraph, grads: &GradientStore) -> Result<()> {
        for layer in model.layers.iter().filter(|l| l.kind.is_parametric()) {
            let Some(wname) = layer.weight.as_deref() else { continue };
            let w = model
                .tensor(wname)
                .ok_or_else(|| Error::Shape(format!("missing weight `{wname}`")))?;
            let g = grads
                .get(wname)
                .ok_or_else(|| Error::Shape(format!("no gradient for `{wname}`")))?;
            let (shape, acc) = self
                .per_layer
                .get_mut(&layer.id)
                .ok_or_else(|| Error::Shape(format!("no accumulator for layer `{}`", layer.id)))?;
            if shape != &w.shape || g.len() != acc.len() {
                return Err(Error::Shape(format!(
                    "importance for `{}` has shape {shape:?}, weight has {:?}",
                    layer.id, w.shape
                )));
            }
            for ((a, &wi), &gi) in acc.iter_mut().zip(&w.data).zip(g) {
                *a += (wi as f64 * gi).abs();
            }
        }
        self.batches += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<TensorSpec> = self
            .per_layer
            .iter()
            .map(|(id, (shape, v))| TensorSpec::new(id, shape.clone(), v.iter().map(|&x| x as f32).collect()))
            .collect();
        let (tensor_index, blob) = encode_tensors(&tensors);
        let manifest = ImportanceManifest {
            version: crate::graph::FORMAT_VERSION,
            kind: "importance".into(),
            batches: self.batches,
            tensor_index,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
        std::fs::write(crate::graph::default_weights_path(path), blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read(path)?;
        let blob = std::fs::read(crate::graph::default_weights_path(path))?;
        Self::decode(&json, &blob)
    }

    /// Parses an importance container (JSON index + f32 data section).
    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: ImportanceManifest =
            serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("importance index: {e}")))?;
        if manifest.version != crate::graph::FORMAT_VERSION || manifest.kind != "importance" {
            return Err(Error::Format("not a version-1 importance file".into()));
        }
        let mut per_layer = BTreeMap::new();
        for t in decode_tensors(&manifest.tensor_index, blob)? {
            if t.data.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Format(format!("importance for `{}` has negative or NaN entries", t.name)));
            }
            per_layer.insert(t.name, (t.shape, t.data.iter().map(|&v| v as f64).collect()));
        }
        Ok(Self {
            per_layer,
            batches: manifest.batches,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportanceManifest {
    version: u32,
    kind: String,
    #[serde(default)]
    batches: usize,
    tensor_index: Vec<TensorIndexEntry>,
}

/// Row-major `rows x cols` matrix (`o x i`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Collapses the trailing kernel axes of an `o x i x k...` importance tensor.
/// Two-dimensional (dense) inputs pass through unchanged.
pub fn spatial_reduce(importance: &[f64], shape: &[usize], reduction: Reduction) -> LayerMatrix {
    let (rows, cols) = (shape[0], shape[1]);
    if shape.len() == 2 {
        return LayerMatrix {
            rows,
            cols,
            data: importance.to_vec(),
        };
    }
    let k: usize = shape[2..].iter().product();
    let data = importance
        .chunks(k)
        .map(|kernel| reduction.reduce(kernel.iter().copied()))
        .collect();
    LayerMatrix { rows, cols, data }
}

/// Output port: one value per row (reduce over inputs). Input port: one value
/// per column (reduce over outputs).
pub fn neural_reduce(matrix: &LayerMatrix, port: Port, reduction: Reduction) -> Vec<f64> {
    match port {
        Port::Output => matrix
            .data
            .chunks(matrix.cols)
            .map(|row| reduction.reduce(row.iter().copied()))
            .collect(),
        Port::Input => (0..matrix.cols)
            .map(|c| reduction.reduce((0..matrix.rows).map(|r| matrix.data[r * matrix.cols + c])))
            .collect(),
    }
}

/// Elementwise reduction across the member-port vectors of one group.
pub fn group_reduce(vectors: &[Vec<f64>], reduction: Reduction) -> Result<Vec<f64>> {
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
        return Err(Error::Shape(format!(
            "group member vectors have lengths {} and {}",
            first.len(),
            bad.len()
        )));
    }
    Ok((0..first.len())
        .map(|c| reduction.reduce(vectors.iter().map(|v| v[c])))
        .collect())
}

/// One importance vector per channel group, indexed by channel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub per_group: Vec<Vec<f64>>,
}

impl GroupImportance {
    pub fn group(&self, n: usize) -> &[f64] {
        &self.per_group[n]
    }
}

/// Runs the full reduction pipeline for every group of `model`.
pub fn group_importance(
    state: &ImportanceState,
    model: &ModelGraph,
    groups: &ChannelGroups,
    config: ReductionConfig,
) -> Result<GroupImportance> {
    let signature = crate::graph::signature_of(model, groups);
    let mut matrices: BTreeMap<&str, LayerMatrix> = BTreeMap::new();
    for (id, shape, values) in state.layers() {
        let layer = model
            .layer(id)
            .ok_or_else(|| Error::Shape(format!("importance for unknown layer `{id}`")))?;
        let expected = match layer.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => layer
                .weight
                .as_deref()
                .and_then(|w| model.tensor(w))
                .map(|t| t.shape.clone()),
            _ => None,
        };
        if expected.as_deref() != Some(shape) {
            return Err(Error::Shape(format!(
                "importance for `{id}` has shape {shape:?}, weight has {expected:?}"
            )));
        }
        matrices.insert(id, spatial_reduce(values, shape, config.spatial));
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for (n, group) in groups.iter().enumerate() {
        let vectors = group
            .members
            .iter()
            .map(|m| {
                matrices
                    .get(m.layer.as_str())
                    .map(|mat| neural_reduce(mat, m.port, config.neural))
                    .ok_or_else(|| Error::Shape(format!("no importance for layer `{}`", m.layer)))
            })
            .collect::<Result<Vec<_>>>()?;
        let reduced = if vectors.is_empty() {
            vec![0.0; signature.get(n)]
        } else {
            group_reduce(&vectors, config.channel)?
        };
        per_group.push(reduced);
    }
    Ok(GroupImportance { per_group })
}

/// The `count` least important channels, lowest index first on ties.
/// Returned in ascending index order.
pub fn select_channels(importance: &[f64], count: usize) -> Result<Vec<usize>> {
    if count == 0 || count >= importance.len() {
        return Err(Error::InvalidArgument(format!(
            "can select between 1 and {} of {} channels, asked for {count}",
            importance.len().saturating_sub(1),
            importance.len()
        )));
    }
    let mut order = removal_order(importance);
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// All channel indices from least to most important; ties by index.
pub fn removal_order(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));
    order
}

/// Sum of the importance of the pruned channels.
pub fn importance_loss(importance: &[f64], pruned: &[usize]) -> f64 {
    pruned.iter().map(|&c| importance[c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_sums_absolute_products() {
        let mut model = crate::toy::mlp(1, &[], 1, 0);
        model.tensors.get_mut("head.weight").unwrap().data = vec![2.0];
        let mut state = ImportanceState::new(&model);
        for g in [0.5, -1.0] {
            let mut grads = GradientStore::default();
            grads.insert("head.weight", vec![g]);
            grads.insert("head.bias", vec![100.0]);
            state.accumulate(&model, &grads).unwrap();
        }
        assert_eq!(state.layer("head").unwrap().1, [3.0]);
        assert_eq!(state.batches(), 2);

        model.tensors.get_mut("head.weight").unwrap().data = vec![0.0];
        let mut zero = ImportanceState::new(&model);
        let mut grads = GradientStore::default();
        grads.insert("head.weight", vec![7.0]);
        zero.accumulate(&model, &grads).unwrap();
        assert_eq!(zero.layer("head").unwrap().1, [0.0]);

        grads.insert("head.weight", vec![1.0, 2.0]);
        assert!(zero.accumulate(&model, &grads).is_err());
    }

    #[test]
    fn spatial_reduction() {
        let dense = spatial_reduce(&[1.0, 2.0, 3.0, 4.0], &[2, 2], Reduction::LInf);
        assert_eq!(dense.data, [1.0, 2.0, 3.0, 4.0]);
        let conv = spatial_reduce(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], Reduction::Sum);
        assert_eq!(conv.data, [10.0]);
        let conv = spatial_reduce(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], Reduction::LInf);
        assert_eq!(conv.data, [4.0]);
        let conv = spatial_reduce(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], Reduction::Mean);
        assert_eq!(conv.data, [2.5]);
    }

    #[test]
    fn neural_reduction() {
        let m = LayerMatrix {
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(neural_reduce(&m, Port::Output, Reduction::LInf), [2.0, 4.0]);
        assert_eq!(neural_reduce(&m, Port::Input, Reduction::Sum), [4.0, 6.0]);
        assert_eq!(neural_reduce(&m, Port::Input, Reduction::Mean), [2.0, 3.0]);
    }

    #[test]
    fn group_reduction() {
        let v = vec![vec![2.0, 4.0], vec![3.0, 4.0]];
        assert_eq!(group_reduce(&v, Reduction::Sum).unwrap(), [5.0, 8.0]);
        assert_eq!(group_reduce(&v, Reduction::LInf).unwrap(), [3.0, 4.0]);
        assert_eq!(group_reduce(&v[..1], Reduction::Mean).unwrap(), [2.0, 4.0]);
        assert!(group_reduce(&[vec![1.0], vec![1.0, 2.0]], Reduction::Sum).is_err());
    }

    #[test]
    fn selection_and_loss() {
        let imp = [0.5, 0.1, 0.9, 0.3];
        assert_eq!(select_channels(&imp, 2).unwrap(), [1, 3]);
        assert!((importance_loss(&imp, &[1, 3]) - 0.4).abs() < 1e-12);
        assert_eq!(importance_loss(&imp, &[]), 0.0);
        assert_eq!(importance_loss(&imp, &[0, 1, 2, 3]), imp.iter().sum::<f64>());
        assert_eq!(select_channels(&[1.0; 4], 1).unwrap(), [0]);
        assert_eq!(select_channels(&[0.2, 0.7, 0.7, 0.1], 3).unwrap(), [0, 1, 3]);
        assert!(select_channels(&imp, 0).is_err());
        assert!(select_channels(&imp, 4).is_err());
    }

    #[test]
    fn reduction_parsing() {
        let cfg: ReductionConfig = "sum,linf,sum".parse().unwrap();
        assert_eq!(cfg, ReductionConfig::default());
        assert_eq!(cfg.to_string().parse::<ReductionConfig>().unwrap(), cfg);
        assert!("sum,sum".parse::<ReductionConfig>().is_err());
        assert!("sum,sum,median".parse::<ReductionConfig>().is_err());
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = crate::toy::mlp(3, &[4], 2, 1);
        let mut state = ImportanceState::new(&model);
        let (_, grads) = crate::executor::loss_and_grads(
            &model,
            &crate::executor::Batch::new(vec![0.5, -1.0, 2.0], vec![1]).unwrap(),
        )
        .unwrap();
        state.accumulate(&model, &grads).unwrap();
        let path = dir.path().join("imp.json");
        state.save(&path).unwrap();
        let back = ImportanceState::load(&path).unwrap();
        assert_eq!(back.batches(), 1);
        for (id, shape, values) in state.layers() {
            let (s, v) = back.layer(id).unwrap();
            assert_eq!(s, shape);
            let expect: Vec<f64> = values.iter().map(|&x| x as f32 as f64).collect();
            assert_eq!(v, expect.as_slice());
        }
    }
}
