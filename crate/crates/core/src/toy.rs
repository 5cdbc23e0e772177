//! Small reference networks used by tests, examples and the `toy` command.

use crate::executor::init_uniform;
use crate::graph::{Layer, LayerKind, ModelGraph, TensorSpec};

struct Builder {
    model: ModelGraph,
}

impl Builder {
    fn new(input_shape: Vec<usize>) -> Self {
        let mut model = ModelGraph::default();
        model
            .layers
            .push(Layer::new("input", LayerKind::Input { shape: input_shape }, &[]));
        Self { model }
    }

    fn plain(&mut self, id: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.model.layers.push(Layer::new(id, kind, inputs));
        id.to_string()
    }

    fn dense(&mut self, id: &str, input: &str, i: usize, o: usize) -> String {
        let mut layer = Layer::new(
            id,
            LayerKind::Dense {
                in_features: i,
                out_features: o,
            },
            &[input],
        );
        layer.weight = Some(format!("{id}.weight"));
        layer.bias = Some(format!("{id}.bias"));
        self.model.insert_tensor(TensorSpec::zeros(format!("{id}.weight"), vec![o, i]));
        self.model.insert_tensor(TensorSpec::zeros(format!("{id}.bias"), vec![o]));
        self.model.layers.push(layer);
        id.to_string()
    }

    fn conv(&mut self, id: &str, input: &str, i: usize, o: usize, k: usize, stride: usize, bias: bool) -> String {
        let mut layer = Layer::new(
            id,
            LayerKind::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: [k, k],
                stride,
                padding: k / 2,
            },
            &[input],
        );
        layer.weight = Some(format!("{id}.weight"));
        self.model.insert_tensor(TensorSpec::zeros(format!("{id}.weight"), vec![o, i, k, k]));
        if bias {
            layer.bias = Some(format!("{id}.bias"));
            self.model.insert_tensor(TensorSpec::zeros(format!("{id}.bias"), vec![o]));
        }
        self.model.layers.push(layer);
        id.to_string()
    }

    fn finish(mut self, last: &str, seed: u64) -> ModelGraph {
        self.model
            .layers
            .push(Layer::new("output", LayerKind::Output, &[last]));
        init_uniform(&mut self.model, seed);
        self.model
    }
}

/// `input -> [Dense -> ReLU]* -> Dense(classes)`.
pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, seed: u64) -> ModelGraph {
    let mut b = Builder::new(vec![inputs]);
    let mut last = "input".to_string();
    let mut width = inputs;
    for (k, &h) in hidden.iter().enumerate() {
        let fc = b.dense(&format!("fc{}", k + 1), &last, width, h);
        last = b.plain(&format!("relu{}", k + 1), LayerKind::ReLU, &[&fc]);
        width = h;
    }
    last = b.dense("head", &last, width, classes);
    b.finish(&last, seed)
}

/// Plain conv stack with a global-pool classifier head.
pub fn conv_net(input: [usize; 3], channels: &[usize], classes: usize, seed: u64) -> ModelGraph {
    let mut b = Builder::new(input.to_vec());
    let mut last = "input".to_string();
    let mut width = input[0];
    for (k, &c) in channels.iter().enumerate() {
        let conv = b.conv(&format!("conv{}", k + 1), &last, width, c, 3, 1, true);
        last = b.plain(&format!("relu{}", k + 1), LayerKind::ReLU, &[&conv]);
        width = c;
    }
    let gap = b.plain("gap", LayerKind::GlobalAvgPool, &[&last]);
    last = b.dense("head", &gap, width, classes);
    b.finish(&last, seed)
}

/// Stem conv, one residual basic block (projection shortcut when `stem !=
/// block`), pooled dense head.
pub fn residual_net(input: [usize; 3], stem: usize, mid: usize, block: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut b = Builder::new(input.to_vec());
    let s = b.conv("stem", "input", input[0], stem, 3, 1, false);
    let s = b.plain("stem_relu", LayerKind::ReLU, &[&s]);
    let c1 = b.conv("block.conv1", &s, stem, mid, 3, 1, false);
    let r1 = b.plain("block.relu1", LayerKind::ReLU, &[&c1]);
    let c2 = b.conv("block.conv2", &r1, mid, block, 3, 1, false);
    let skip = if stem == block {
        s.clone()
    } else {
        b.conv("block.proj", &s, stem, block, 1, 1, false)
    };
    let add = b.plain("block.add", LayerKind::Add, &[&c2, &skip]);
    let r2 = b.plain("block.relu2", LayerKind::ReLU, &[&add]);
    let gap = b.plain("gap", LayerKind::GlobalAvgPool, &[&r2]);
    let head = b.dense("head", &gap, block, classes);
    b.finish(&head, seed)
}

/// A network touching every layer kind, for gradient checks.
pub fn every_kind(seed: u64) -> ModelGraph {
    let mut b = Builder::new(vec![2, 6, 6]);
    let c1 = b.conv("conv1", "input", 2, 3, 3, 1, true);
    let r1 = b.plain("relu1", LayerKind::ReLU, &[&c1]);
    let p1 = b.plain("maxpool", LayerKind::MaxPool2d { window: 2, stride: 2 }, &[&r1]);
    let c2 = b.conv("conv2", &p1, 3, 3, 3, 1, false);
    let add = b.plain("add", LayerKind::Add, &[&c2, &p1]);
    let p2 = b.plain("avgpool", LayerKind::AvgPool2d { window: 2, stride: 1 }, &[&add]);
    let c3 = b.conv("conv3", &p2, 3, 4, 1, 2, true);
    let gap = b.plain("gap", LayerKind::GlobalAvgPool, &[&c3]);
    let flat = b.plain("flatten", LayerKind::Flatten, &[&gap]);
    let fc = b.dense("fc", &flat, 4, 5);
    let r2 = b.plain("relu2", LayerKind::ReLU, &[&fc]);
    let head = b.dense("head", &r2, 5, 3);
    b.finish(&head, seed)
}
