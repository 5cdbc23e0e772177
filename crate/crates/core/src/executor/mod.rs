//! Reference forward/backward engine for the layer kinds in [`crate::graph`].
//!
//! Weights are stored as `f32` in the model; all arithmetic here runs in
//! `f64` so that gradient checks against finite differences are stable.

mod data;
mod ops;
mod train;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{FeatureShape, LayerKind, ModelGraph};

pub use data::{generate_blobs, parse_csv, BatchSampler, BlobsConfig, DataSource, Dataset, Split};
pub use train::{evaluate, fine_tune, init_uniform, sgd_step, TrainConfig};

/// Inputs are `batch x numel(per-example shape)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if !inputs.len().is_multiple_of(labels.len()) {
            return Err(Error::Shape(format!(
                "{} input values do not split evenly over {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `f64` working copy of every tensor in a model.
pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_of(model: &ModelGraph) -> Params {
    model
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.data.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Loss gradients per tensor name, shaped like the owning tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientStore {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradientStore {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.grads.insert(name.into(), grad);
    }
}

/// Compiled execution order with per-layer shapes.
struct Plan {
    order: Vec<usize>,
    shapes: Vec<FeatureShape>,
    inputs: Vec<Vec<usize>>,
    input_layer: usize,
    output_layer: usize,
}

impl Plan {
    fn new(model: &ModelGraph) -> Result<Self> {
        let violations = model.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        let order = model.topo_order().map_err(|v| Error::InvalidModel(vec![v]))?;
        let by_id = model.infer_shapes().map_err(Error::InvalidModel)?;
        let index: BTreeMap<&str, usize> = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let shapes = model.layers.iter().map(|l| by_id[&l.id]).collect();
        let inputs = model
            .layers
            .iter()
            .map(|l| l.inputs.iter().map(|id| index[id.as_str()]).collect())
            .collect();
        let find = |pred: fn(&LayerKind) -> bool| model.layers.iter().position(|l| pred(&l.kind)).unwrap();
        Ok(Self {
            order,
            shapes,
            inputs,
            input_layer: find(|k| matches!(k, LayerKind::Input { .. })),
            output_layer: find(|k| matches!(k, LayerKind::Output)),
        })
    }
}

/// Layer outputs retained by [`forward`] for the backward pass.
pub struct Activations {
    plan: Plan,
    values: Vec<Vec<f64>>,
    batch: usize,
}

impl Activations {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output of layer `id`, `batch x numel`.
    pub fn of(&self, model: &ModelGraph, id: &str) -> Option<&[f64]> {
        let i = model.layers.iter().position(|l| l.id == id)?;
        Some(&self.values[i])
    }
}

fn run_forward(model: &ModelGraph, params: &Params, batch: &Batch) -> Result<Activations> {
    let plan = Plan::new(model)?;
    let n = batch.len();
    let in_shape = plan.shapes[plan.input_layer];
    if batch.inputs.len() != n * in_shape.numel() {
        return Err(Error::Shape(format!(
            "batch has {} values per example, model input expects {}",
            batch.inputs.len() / n,
            in_shape.numel()
        )));
    }
    let out_shape = plan.shapes[plan.output_layer];
    if out_shape.spatial.is_some() {
        return Err(Error::Shape("model output is spatial; expected flat logits".into()));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= out_shape.channels) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            out_shape.channels
        )));
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); model.layers.len()];
    for &i in &plan.order {
        let layer = &model.layers[i];
        let shape = plan.shapes[i];
        let ins = &plan.inputs[i];
        let value = match &layer.kind {
            LayerKind::Input { .. } => batch.inputs.iter().map(|&v| v as f64).collect(),
            LayerKind::Dense { .. } => {
                let w = &params[layer.weight.as_deref().unwrap()];
                let b = layer.bias.as_deref().map(|name| params[name].as_slice());
                ops::dense_forward(&values[ins[0]], w, b, n, plan.shapes[ins[0]].channels, shape.channels)
            }
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = &params[layer.weight.as_deref().unwrap()];
                let b = layer.bias.as_deref().map(|name| params[name].as_slice());
                let geom = ops::ConvGeom::new(plan.shapes[ins[0]], shape, *kernel, *stride, *padding);
                ops::conv_forward(&values[ins[0]], w, b, n, &geom)
            }
            LayerKind::Add => {
                let mut acc = values[ins[0]].clone();
                for &src in &ins[1..] {
                    for (a, v) in acc.iter_mut().zip(&values[src]) {
                        *a += v;
                    }
                }
                acc
            }
            LayerKind::ReLU => values[ins[0]].iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool2d { window, stride } => {
                ops::pool_forward(&values[ins[0]], n, plan.shapes[ins[0]], shape, *window, *stride, true)
            }
            LayerKind::AvgPool2d { window, stride } => {
                ops::pool_forward(&values[ins[0]], n, plan.shapes[ins[0]], shape, *window, *stride, false)
            }
            LayerKind::GlobalAvgPool => ops::gap_forward(&values[ins[0]], n, plan.shapes[ins[0]]),
            LayerKind::Flatten | LayerKind::Output => values[ins[0]].clone(),
        };
        values[i] = value;
    }
    Ok(Activations {
        plan,
        values,
        batch: n,
    })
}

/// Runs the model on `batch`; returns `batch x classes` logits.
pub fn forward(model: &ModelGraph, batch: &Batch) -> Result<(Vec<f64>, Activations)> {
    let acts = run_forward(model, &params_of(model), batch)?;
    let logits = acts.values[acts.plan.output_layer].clone();
    Ok((logits, acts))
}

/// Row-wise softmax of `batch x classes` logits.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// [`forward`] with the model's tensors replaced by `params`.
pub fn forward_with_params(model: &ModelGraph, params: &Params, batch: &Batch) -> Result<(Vec<f64>, Activations)> {
    let acts = run_forward(model, params, batch)?;
    let logits = acts.values[acts.plan.output_layer].clone();
    Ok((logits, acts))
}

/// Loss of the model with its tensors replaced by `params`.
pub fn loss_with_params(model: &ModelGraph, params: &Params, batch: &Batch) -> Result<f64> {
    let acts = run_forward(model, params, batch)?;
    let classes = acts.plan.shapes[acts.plan.output_layer].channels;
    Ok(cross_entropy(&acts.values[acts.plan.output_layer], &batch.labels, classes))
}

/// Mean cross-entropy on `batch` and its gradient w.r.t. every tensor.
pub fn loss_and_grads(model: &ModelGraph, batch: &Batch) -> Result<(f64, GradientStore)> {
    let params = params_of(model);
    let acts = run_forward(model, &params, batch)?;
    let plan = &acts.plan;
    let n = acts.batch;
    let classes = plan.shapes[plan.output_layer].channels;
    let logits = &acts.values[plan.output_layer];
    let loss = cross_entropy(logits, &batch.labels, classes);

    let mut upstream: Vec<Option<Vec<f64>>> = vec![None; model.layers.len()];
    let mut dlogits = softmax(logits, classes);
    for (b, &y) in batch.labels.iter().enumerate() {
        dlogits[b * classes + y] -= 1.0;
    }
    for g in &mut dlogits {
        *g /= n as f64;
    }
    upstream[plan.output_layer] = Some(dlogits);

    let mut store = GradientStore::default();
    for name in model.tensors.keys() {
        store.insert(name.clone(), vec![0.0; params[name].len()]);
    }

    for &i in plan.order.iter().rev() {
        let Some(dy) = upstream[i].take() else { continue };
        let layer = &model.layers[i];
        let ins = &plan.inputs[i];
        let shape = plan.shapes[i];
        let mut send = |src: usize, dx: Vec<f64>| match &mut upstream[src] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(dx) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(dx),
        };
        match &layer.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Dense { .. } => {
                let x = &acts.values[ins[0]];
                let wname = layer.weight.as_deref().unwrap();
                let grads = ops::dense_backward(
                    x,
                    &params[wname],
                    &dy,
                    n,
                    plan.shapes[ins[0]].channels,
                    shape.channels,
                );
                store.grads.insert(wname.to_string(), grads.dw);
                if let Some(bname) = layer.bias.as_deref() {
                    store.grads.insert(bname.to_string(), grads.db);
                }
                send(ins[0], grads.dx);
            }
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let x = &acts.values[ins[0]];
                let wname = layer.weight.as_deref().unwrap();
                let geom = ops::ConvGeom::new(plan.shapes[ins[0]], shape, *kernel, *stride, *padding);
                let grads = ops::conv_backward(x, &params[wname], &dy, n, &geom);
                store.grads.insert(wname.to_string(), grads.dw);
                if let Some(bname) = layer.bias.as_deref() {
                    store.grads.insert(bname.to_string(), grads.db);
                }
                send(ins[0], grads.dx);
            }
            LayerKind::Add => {
                for &src in ins {
                    send(src, dy.clone());
                }
            }
            LayerKind::ReLU => {
                let x = &acts.values[ins[0]];
                let dx = x.iter().zip(&dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                send(ins[0], dx);
            }
            LayerKind::MaxPool2d { window, stride } => {
                let dx = ops::pool_backward(
                    &acts.values[ins[0]],
                    &dy,
                    n,
                    plan.shapes[ins[0]],
                    shape,
                    *window,
                    *stride,
                    true,
                );
                send(ins[0], dx);
            }
            LayerKind::AvgPool2d { window, stride } => {
                let dx = ops::pool_backward(
                    &acts.values[ins[0]],
                    &dy,
                    n,
                    plan.shapes[ins[0]],
                    shape,
                    *window,
                    *stride,
                    false,
                );
                send(ins[0], dx);
            }
            LayerKind::GlobalAvgPool => {
                send(ins[0], ops::gap_backward(&dy, n, plan.shapes[ins[0]]));
            }
            LayerKind::Flatten | LayerKind::Output => send(ins[0], dy),
        }
    }
    Ok((loss, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, plain};
    use crate::graph::{Layer, TensorSpec};

    fn identity_dense() -> ModelGraph {
        let mut fc = Layer::new(
            "fc",
            LayerKind::Dense {
                in_features: 2,
                out_features: 2,
            },
            &["in"],
        );
        fc.weight = Some("w".into());
        fc.bias = Some("b".into());
        build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            (
                fc,
                vec![
                    TensorSpec::new("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                    TensorSpec::new("b", vec![2], vec![0.0, 0.0]),
                ],
            ),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ])
    }

    #[test]
    fn identity_dense_forward() {
        let (logits, _) = forward(&identity_dense(), &Batch::new(vec![3.0, 5.0], vec![0]).unwrap()).unwrap();
        assert_eq!(logits, [3.0, 5.0]);
    }

    #[test]
    fn relu_forward() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            plain(Layer::new("r", LayerKind::ReLU, &["in"])),
            plain(Layer::new("out", LayerKind::Output, &["r"])),
        ]);
        let (logits, _) = forward(&m, &Batch::new(vec![-1.0, 2.0], vec![0]).unwrap()).unwrap();
        assert_eq!(logits, [0.0, 2.0]);
    }

    #[test]
    fn two_identity_branches_double_the_input() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![3] }, &[])),
            plain(Layer::new("a", LayerKind::Flatten, &["in"])),
            plain(Layer::new("b", LayerKind::Flatten, &["in"])),
            plain(Layer::new("sum", LayerKind::Add, &["a", "b"])),
            plain(Layer::new("out", LayerKind::Output, &["sum"])),
        ]);
        let (logits, _) = forward(&m, &Batch::new(vec![1.0, -2.0, 0.5], vec![0]).unwrap()).unwrap();
        assert_eq!(logits, [2.0, -4.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut m = identity_dense();
        m.tensors.get_mut("w").unwrap().data = vec![0.0; 4];
        let (loss, _) = loss_and_grads(&m, &Batch::new(vec![1.0, 2.0, -1.0, 0.0], vec![0, 1]).unwrap()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let m = identity_dense();
        assert!(matches!(
            forward(&m, &Batch::new(vec![1.0, 2.0, 3.0], vec![0]).unwrap()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward(&m, &Batch::new(vec![1.0, 2.0], vec![2]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -50.0, 0.0, 50.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
