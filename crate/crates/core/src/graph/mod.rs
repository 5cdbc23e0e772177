//! Network representation: layers, weight tensors, validation and shape
//! inference. Channel groups live in [`groups`], structural pruning in
//! [`prune`] and the on-disk container in [`format`].

mod format;
mod groups;
mod prune;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use format::{
    decode_model, decode_tensors, default_weights_path, encode_model, encode_tensors, load_model,
    manifest_fingerprint, save_model, TensorIndexEntry, FORMAT_VERSION,
};
pub use groups::{build_channel_groups, signature_of, ChannelGroup, ChannelGroups, Port, PortRef, Signature};
pub use prune::{apply_pruning, select_axis};

/// A named dense tensor of `f32` values stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    /// `shape` is `[features]` or `[channels, height, width]`.
    Input { shape: Vec<usize> },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Add,
    ReLU,
    MaxPool2d { window: usize, stride: usize },
    AvgPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Output,
}

fn one() -> usize {
    1
}

pub(crate) const KNOWN_KINDS: &[&str] = &[
    "Input",
    "Dense",
    "Conv2d",
    "Add",
    "ReLU",
    "MaxPool2d",
    "AvgPool2d",
    "GlobalAvgPool",
    "Flatten",
    "Output",
];

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Add => "Add",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool2d { .. } => "MaxPool2d",
            LayerKind::AvgPool2d { .. } => "AvgPool2d",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Flatten => "Flatten",
            LayerKind::Output => "Output",
        }
    }

    /// Dense and Conv2d own weights and have prunable ports.
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// `(in, out)` channel counts of a parametric layer.
    pub fn channels(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => Some((in_channels, out_channels)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight: None,
            bias: None,
        }
    }

    pub fn weight_names(&self) -> impl Iterator<Item = &str> {
        self.weight.iter().chain(self.bias.iter()).map(String::as_str)
    }
}

/// Channel count plus optional spatial extent of a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub spatial: Option<(usize, usize)>,
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        let (h, w) = self.spatial.unwrap_or((1, 1));
        self.channels * h * w
    }
}

/// One broken rule, attributed to a layer (or to `<graph>` for global rules).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub layer: String,
    pub rule: String,
}

impl Violation {
    fn new(layer: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            layer: layer.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer `{}`: {}", self.layer, self.rule)
    }
}

pub const GRAPH: &str = "<graph>";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub tensors: BTreeMap<String, TensorSpec>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelGraph {
    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub(crate) fn layer_mut(&mut self, id: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.get(name)
    }

    pub fn insert_tensor(&mut self, tensor: TensorSpec) {
        self.tensors.insert(tensor.name.clone(), tensor);
    }

    pub fn input_layer(&self) -> Option<&Layer> {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
    }

    pub fn output_layer(&self) -> Option<&Layer> {
        self.layers.iter().find(|l| matches!(l.kind, LayerKind::Output))
    }

    /// Total number of scalar parameters over all tensors.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(TensorSpec::numel).sum()
    }

    /// Layer indices in topological order, ties broken by layer id.
    ///
    /// Fails with a violation on cycles or dangling references.
    pub fn topo_order(&self) -> Result<Vec<usize>, Violation> {
        let index: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.layers.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            for input in &layer.inputs {
                let &src = index.get(input.as_str()).ok_or_else(|| {
                    Violation::new(&layer.id, format!("input `{input}` does not exist"))
                })?;
                indegree[i] += 1;
                consumers[src].push(i);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| (self.layers[i].id.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(entry) = ready.pop_first() {
            let i = entry.1;
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((self.layers[c].id.as_str(), c));
                }
            }
        }
        if order.len() != self.layers.len() {
            let stuck = self
                .layers
                .iter()
                .enumerate()
                .filter(|(i, _)| indegree[*i] > 0)
                .map(|(_, l)| l.id.as_str())
                .min()
                .unwrap_or(GRAPH);
            return Err(Violation::new(stuck, "graph contains a cycle"));
        }
        Ok(order)
    }

    /// Output shape of every layer, in topological order.
    ///
    /// Layers whose inputs cannot be resolved are skipped and reported.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, FeatureShape>, Vec<Violation>> {
        let order = self.topo_order().map_err(|v| vec![v])?;
        let mut shapes: BTreeMap<String, FeatureShape> = BTreeMap::new();
        let mut violations = Vec::new();
        for &i in &order {
            let layer = &self.layers[i];
            let ins: Option<Vec<FeatureShape>> =
                layer.inputs.iter().map(|id| shapes.get(id).copied()).collect();
            let Some(ins) = ins else { continue };
            match output_shape(layer, &ins) {
                Ok(shape) => {
                    shapes.insert(layer.id.clone(), shape);
                }
                Err(rule) => violations.push(Violation::new(&layer.id, rule)),
            }
        }
        if violations.is_empty() {
            Ok(shapes)
        } else {
            Err(violations)
        }
    }

    /// All broken invariants; empty iff the graph is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate_graph(self)
    }
}

fn output_shape(layer: &Layer, ins: &[FeatureShape]) -> Result<FeatureShape, String> {
    let arity_ok = match layer.kind {
        LayerKind::Input { .. } => ins.is_empty(),
        LayerKind::Add => ins.len() >= 2,
        _ => ins.len() == 1,
    };
    if !arity_ok {
        return Err(match layer.kind {
            LayerKind::Input { .. } => "Input takes no inputs".to_string(),
            LayerKind::Add => format!("Add requires at least 2 inputs, got {}", ins.len()),
            _ => format!("{} requires exactly 1 input, got {}", layer.kind.name(), ins.len()),
        });
    }
    match &layer.kind {
        LayerKind::Input { shape } => match shape.as_slice() {
            [f] if *f > 0 => Ok(FeatureShape {
                channels: *f,
                spatial: None,
            }),
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(FeatureShape {
                channels: *c,
                spatial: Some((*h, *w)),
            }),
            _ => Err(format!("Input shape {shape:?} must be [features] or [c, h, w] with positive extents")),
        },
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let x = ins[0];
            if x.spatial.is_some() {
                return Err("Dense input must be flat; insert GlobalAvgPool or Flatten".into());
            }
            if *in_features == 0 || *out_features == 0 {
                return Err("Dense features must be positive".into());
            }
            if x.channels != *in_features {
                return Err(format!(
                    "Dense in_features={in_features} but producer has {} channels",
                    x.channels
                ));
            }
            Ok(FeatureShape {
                channels: *out_features,
                spatial: None,
            })
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let x = ins[0];
            let Some((h, w)) = x.spatial else {
                return Err("Conv2d input must be spatial".into());
            };
            if *in_channels == 0 || *out_channels == 0 || kernel[0] == 0 || kernel[1] == 0 || *stride == 0 {
                return Err("Conv2d channels, kernel and stride must be positive".into());
            }
            if x.channels != *in_channels {
                return Err(format!(
                    "Conv2d in_channels={in_channels} but producer has {} channels",
                    x.channels
                ));
            }
            let ho = window_out(h, kernel[0], *stride, *padding);
            let wo = window_out(w, kernel[1], *stride, *padding);
            match (ho, wo) {
                (Some(ho), Some(wo)) => Ok(FeatureShape {
                    channels: *out_channels,
                    spatial: Some((ho, wo)),
                }),
                _ => Err(format!("Conv2d kernel {kernel:?} does not fit input {h}x{w}")),
            }
        }
        LayerKind::Add => {
            let first = ins[0];
            if ins.iter().any(|s| s.channels != first.channels) {
                let counts: Vec<usize> = ins.iter().map(|s| s.channels).collect();
                return Err(format!("Add inputs have mismatched channel counts {counts:?}"));
            }
            if ins.iter().any(|s| s.spatial != first.spatial) {
                return Err("Add inputs have mismatched spatial extents".into());
            }
            Ok(first)
        }
        LayerKind::ReLU | LayerKind::Output => Ok(ins[0]),
        LayerKind::MaxPool2d { window, stride } | LayerKind::AvgPool2d { window, stride } => {
            let x = ins[0];
            let Some((h, w)) = x.spatial else {
                return Err(format!("{} input must be spatial", layer.kind.name()));
            };
            if *window == 0 || *stride == 0 {
                return Err("pool window and stride must be positive".into());
            }
            match (window_out(h, *window, *stride, 0), window_out(w, *window, *stride, 0)) {
                (Some(ho), Some(wo)) => Ok(FeatureShape {
                    channels: x.channels,
                    spatial: Some((ho, wo)),
                }),
                _ => Err(format!("pool window {window} does not fit input {h}x{w}")),
            }
        }
        LayerKind::GlobalAvgPool => {
            let x = ins[0];
            if x.spatial.is_none() {
                return Err("GlobalAvgPool input must be spatial".into());
            }
            Ok(FeatureShape {
                channels: x.channels,
                spatial: None,
            })
        }
        LayerKind::Flatten => {
            let x = ins[0];
            match x.spatial {
                None | Some((1, 1)) => Ok(FeatureShape {
                    channels: x.channels,
                    spatial: None,
                }),
                Some((h, w)) => Err(format!(
                    "Flatten over a {h}x{w} spatial extent mixes channels; only 1x1 is supported"
                )),
            }
        }
    }
}

pub(crate) fn window_out(extent: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent.checked_add(padding.checked_mul(2)?)?;
    if padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

/// Returns every broken Layer/ModelGraph invariant.
pub fn validate_graph(model: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = BTreeSet::new();
    for layer in &model.layers {
        if layer.id.is_empty() {
            out.push(Violation::new(GRAPH, "layer with empty id"));
        } else if !seen.insert(layer.id.as_str()) {
            out.push(Violation::new(&layer.id, "duplicate layer id"));
        }
    }

    let inputs: Vec<_> = model
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Input { .. }))
        .collect();
    if inputs.len() != 1 {
        out.push(Violation::new(
            GRAPH,
            format!("expected exactly one Input layer, found {}", inputs.len()),
        ));
    }
    let outputs: Vec<_> = model
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Output))
        .collect();
    if outputs.len() != 1 {
        out.push(Violation::new(
            GRAPH,
            format!("expected exactly one Output layer, found {}", outputs.len()),
        ));
    }

    // Every layer except Output must feed something; Output feeds nothing.
    let mut consumed: BTreeSet<&str> = BTreeSet::new();
    for layer in &model.layers {
        for input in &layer.inputs {
            consumed.insert(input.as_str());
        }
    }
    for layer in &model.layers {
        let is_output = matches!(layer.kind, LayerKind::Output);
        let used = consumed.contains(layer.id.as_str());
        if is_output && used {
            out.push(Violation::new(&layer.id, "Output layer must not be consumed"));
        }
        if !is_output && !used {
            out.push(Violation::new(&layer.id, "layer output is never consumed"));
        }
    }

    if out.iter().any(|v| v.rule == "duplicate layer id") {
        return out;
    }
    match model.infer_shapes() {
        Ok(_) => {}
        Err(vs) => out.extend(vs),
    }

    for (name, t) in &model.tensors {
        if name != &t.name {
            out.push(Violation::new(GRAPH, format!("tensor key `{name}` differs from its name `{}`", t.name)));
        }
        if t.shape.is_empty() || t.shape.contains(&0) {
            out.push(Violation::new(GRAPH, format!("tensor `{name}` has invalid shape {:?}", t.shape)));
        } else if t.numel() != t.data.len() {
            out.push(Violation::new(
                GRAPH,
                format!("tensor `{name}` shape {:?} does not match {} values", t.shape, t.data.len()),
            ));
        }
    }

    for layer in &model.layers {
        check_weights(model, layer, &mut out);
    }
    out
}

fn check_weights(model: &ModelGraph, layer: &Layer, out: &mut Vec<Violation>) {
    let expected_weight: Option<Vec<usize>> = match layer.kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => Some(vec![out_features, in_features]),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => Some(vec![out_channels, in_channels, kernel[0], kernel[1]]),
        _ => None,
    };
    let Some(expected_weight) = expected_weight else {
        if layer.weight.is_some() || layer.bias.is_some() {
            out.push(Violation::new(
                &layer.id,
                format!("{} layers own no tensors", layer.kind.name()),
            ));
        }
        return;
    };
    match layer.weight.as_deref() {
        None => out.push(Violation::new(&layer.id, "missing mandatory weight tensor")),
        Some(name) => match model.tensor(name) {
            None => out.push(Violation::new(&layer.id, format!("weight `{name}` does not resolve"))),
            Some(t) if t.shape != expected_weight => out.push(Violation::new(
                &layer.id,
                format!("weight `{name}` has shape {:?}, expected {expected_weight:?}", t.shape),
            )),
            Some(_) => {}
        },
    }
    if let Some(name) = layer.bias.as_deref() {
        match model.tensor(name) {
            None => out.push(Violation::new(&layer.id, format!("bias `{name}` does not resolve"))),
            Some(t) if t.shape != [expected_weight[0]] => out.push(Violation::new(
                &layer.id,
                format!("bias `{name}` has shape {:?}, expected [{}]", t.shape, expected_weight[0]),
            )),
            Some(_) => {}
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn dense(id: &str, input: &str, i: usize, o: usize, bias: bool) -> (Layer, Vec<TensorSpec>) {
        let mut layer = Layer::new(
            id,
            LayerKind::Dense {
                in_features: i,
                out_features: o,
            },
            &[input],
        );
        let wname = format!("{id}.weight");
        let data = (0..o * i).map(|k| k as f32 * 0.1 - 0.3).collect();
        let mut tensors = vec![TensorSpec::new(&wname, vec![o, i], data)];
        layer.weight = Some(wname);
        if bias {
            let bname = format!("{id}.bias");
            tensors.push(TensorSpec::new(&bname, vec![o], vec![0.05; o]));
            layer.bias = Some(bname);
        }
        (layer, tensors)
    }

    pub fn build(parts: Vec<(Layer, Vec<TensorSpec>)>) -> ModelGraph {
        let mut m = ModelGraph::default();
        for (layer, tensors) in parts {
            m.layers.push(layer);
            for t in tensors {
                m.insert_tensor(t);
            }
        }
        m
    }

    pub fn plain(layer: Layer) -> (Layer, Vec<TensorSpec>) {
        (layer, Vec::new())
    }

    /// Input(4) -> Dense(4,8) -> ReLU -> Dense(8,6) -> Dense(6,3) -> Output
    pub fn dense_chain() -> ModelGraph {
        build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![4] }, &[])),
            dense("fc1", "in", 4, 8, true),
            plain(Layer::new("relu", LayerKind::ReLU, &["fc1"])),
            dense("fc2", "relu", 8, 6, true),
            dense("fc3", "fc2", 6, 3, false),
            plain(Layer::new("out", LayerKind::Output, &["fc3"])),
        ])
    }

    #[test]
    fn dense_chain_is_valid() {
        assert_eq!(validate_graph(&dense_chain()), vec![]);
    }

    #[test]
    fn three_layer_chain_is_valid() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![3] }, &[])),
            dense("a", "in", 3, 5, true),
            dense("b", "a", 5, 4, true),
            dense("c", "b", 4, 2, true),
            plain(Layer::new("out", LayerKind::Output, &["c"])),
        ]);
        assert!(validate_graph(&m).is_empty());
    }

    #[test]
    fn add_with_mismatched_channels_is_reported() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![4] }, &[])),
            dense("a", "in", 4, 8, false),
            dense("b", "in", 4, 6, false),
            plain(Layer::new("sum", LayerKind::Add, &["a", "b"])),
            plain(Layer::new("out", LayerKind::Output, &["sum"])),
        ]);
        let v = validate_graph(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].layer, "sum");
    }

    #[test]
    fn dense_fed_by_narrower_producer_is_reported() {
        let mut m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![4] }, &[])),
            dense("fc", "in", 8, 2, false),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ]);
        let v = validate_graph(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].layer, "fc");
        m.layers[1].kind = LayerKind::Dense {
            in_features: 4,
            out_features: 2,
        };
        // weight still declares (2, 8)
        assert_eq!(validate_graph(&m).len(), 1);
    }

    #[test]
    fn cycles_and_dangling_inputs() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            plain(Layer::new("a", LayerKind::Add, &["in", "b"])),
            plain(Layer::new("b", LayerKind::ReLU, &["a"])),
            plain(Layer::new("out", LayerKind::Output, &["b"])),
        ]);
        assert!(validate_graph(&m).iter().any(|v| v.rule.contains("cycle")));

        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            plain(Layer::new("out", LayerKind::Output, &["nowhere"])),
        ]);
        assert!(validate_graph(&m).iter().any(|v| v.rule.contains("does not exist")));
    }

    #[test]
    fn topo_order_breaks_ties_by_id() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            plain(Layer::new("z", LayerKind::ReLU, &["in"])),
            plain(Layer::new("a", LayerKind::ReLU, &["in"])),
            plain(Layer::new("sum", LayerKind::Add, &["z", "a"])),
            plain(Layer::new("out", LayerKind::Output, &["sum"])),
        ]);
        let ids: Vec<_> = m.topo_order().unwrap().into_iter().map(|i| m.layers[i].id.as_str()).collect();
        assert_eq!(ids, ["in", "a", "z", "sum", "out"]);
    }

    #[test]
    fn flatten_over_spatial_extent_is_rejected() {
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2, 3, 3] }, &[])),
            plain(Layer::new("flat", LayerKind::Flatten, &["in"])),
            plain(Layer::new("out", LayerKind::Output, &["flat"])),
        ]);
        let v = validate_graph(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].layer, "flat");
    }

    #[test]
    fn tensor_length_must_match_shape() {
        let mut m = dense_chain();
        m.tensors.get_mut("fc1.bias").unwrap().data.pop();
        assert!(!validate_graph(&m).is_empty());
    }
}
