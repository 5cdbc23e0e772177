//! Channel groups: sets of layer ports whose channel counts are tied together
//! by sequential connections, shared inputs and addition nodes.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use super::{LayerKind, ModelGraph};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Input,
    Output,
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Port::Input => "in",
            Port::Output => "out",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub layer: String,
    pub port: Port,
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub index: usize,
    /// Dense/Conv2d ports in topological order.
    pub members: Vec<PortRef>,
    pub size: usize,
    pub prunable: bool,
    /// Layer whose output channel count defines the group size.
    pub anchor: String,
}

/// The partition of a model's channel dimensions into groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGroups {
    groups: Vec<ChannelGroup>,
    by_port: HashMap<(String, Port), usize>,
}

impl ChannelGroups {
    pub fn group_of(&self, layer: &str, port: Port) -> Option<usize> {
        self.by_port.get(&(layer.to_string(), port)).copied()
    }

    pub fn prunable(&self) -> impl Iterator<Item = &ChannelGroup> {
        self.groups.iter().filter(|g| g.prunable)
    }

    pub fn as_slice(&self) -> &[ChannelGroup] {
        &self.groups
    }

    /// The signature these groups had when they were built.
    pub fn root_signature(&self) -> Signature {
        Signature::new(self.groups.iter().map(|g| g.size).collect())
    }
}

impl Deref for ChannelGroups {
    type Target = [ChannelGroup];

    fn deref(&self) -> &[ChannelGroup] {
        &self.groups
    }
}

/// Per-group channel counts; identifies a sub-model's architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(Vec<usize>);

impl Signature {
    pub fn new(counts: Vec<usize>) -> Self {
        Self(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, n: usize) -> usize {
        self.0[n]
    }

    /// Copy with component `n` replaced.
    pub fn with(&self, n: usize, count: usize) -> Self {
        let mut counts = self.0.clone();
        counts[n] = count;
        Self(counts)
    }
}

impl From<Vec<usize>> for Signature {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn add(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the older (lower) root so roots track first appearance.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (keep, drop) = if ra <= rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop] = keep;
        keep
    }
}

/// Derives the channel groups of a validated model.
pub fn build_channel_groups(model: &ModelGraph) -> Result<ChannelGroups> {
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations));
    }
    let order = model.topo_order().map_err(|v| Error::InvalidModel(vec![v]))?;
    let shapes = model.infer_shapes().map_err(Error::InvalidModel)?;

    let mut uf = UnionFind { parent: Vec::new() };
    // Creating layer of each element, indexed by element id.
    let mut anchors: Vec<String> = Vec::new();
    let mut out_elem: HashMap<&str, usize> = HashMap::new();
    let mut members: Vec<(usize, PortRef)> = Vec::new();
    let mut frozen: Vec<usize> = Vec::new();

    for &i in &order {
        let layer = &model.layers[i];
        let producer = |k: usize| out_elem[layer.inputs[k].as_str()];
        let elem = match &layer.kind {
            LayerKind::Input { .. } => {
                let e = uf.add();
                anchors.push(layer.id.clone());
                frozen.push(e);
                e
            }
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                members.push((
                    producer(0),
                    PortRef {
                        layer: layer.id.clone(),
                        port: Port::Input,
                    },
                ));
                let e = uf.add();
                anchors.push(layer.id.clone());
                members.push((
                    e,
                    PortRef {
                        layer: layer.id.clone(),
                        port: Port::Output,
                    },
                ));
                e
            }
            LayerKind::Add => {
                let mut e = producer(0);
                for k in 1..layer.inputs.len() {
                    e = uf.union(e, producer(k));
                }
                e
            }
            LayerKind::ReLU
            | LayerKind::MaxPool2d { .. }
            | LayerKind::AvgPool2d { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Flatten => producer(0),
            LayerKind::Output => {
                let e = producer(0);
                frozen.push(e);
                e
            }
        };
        out_elem.insert(layer.id.as_str(), elem);
    }

    // Roots are the minimal element of their set, i.e. first appearance.
    let mut root_to_group: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<ChannelGroup> = Vec::new();
    for e in 0..anchors.len() {
        let r = uf.find(e);
        if r == e {
            let anchor = &anchors[e];
            root_to_group.insert(r, groups.len());
            groups.push(ChannelGroup {
                index: groups.len(),
                members: Vec::new(),
                size: shapes[anchor].channels,
                prunable: true,
                anchor: anchor.clone(),
            });
        }
    }
    let mut by_port = HashMap::new();
    for (e, port) in members {
        let g = root_to_group[&uf.find(e)];
        by_port.insert((port.layer.clone(), port.port), g);
        groups[g].members.push(port);
    }
    for e in frozen {
        let g = root_to_group[&uf.find(e)];
        groups[g].prunable = false;
    }
    Ok(ChannelGroups { groups, by_port })
}

/// Reads the current channel count of every group from `model`.
pub fn signature_of(model: &ModelGraph, groups: &ChannelGroups) -> Signature {
    let counts = groups
        .iter()
        .map(|g| match model.layer(&g.anchor).map(|l| &l.kind) {
            Some(LayerKind::Input { shape }) => shape[0],
            Some(kind) => kind.channels().map(|(_, o)| o).unwrap_or(g.size),
            None => g.size,
        })
        .collect();
    Signature(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, dense, dense_chain, plain};
    use crate::graph::{Layer, TensorSpec};

    pub(crate) fn conv(id: &str, input: &str, i: usize, o: usize) -> (Layer, Vec<TensorSpec>) {
        let mut layer = Layer::new(
            id,
            LayerKind::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
            },
            &[input],
        );
        let w = format!("{id}.weight");
        layer.weight = Some(w.clone());
        (layer, vec![TensorSpec::zeros(w, vec![o, i, 3, 3])])
    }

    fn basic_block(projection: bool) -> ModelGraph {
        let mut parts = vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![4, 6, 6] }, &[])),
            conv("conv1", "in", 4, 8),
            plain(Layer::new("relu1", LayerKind::ReLU, &["conv1"])),
        ];
        if projection {
            parts.push(conv("conv2", "relu1", 8, 16));
            parts.push(conv("proj", "in", 4, 16));
            parts.push(plain(Layer::new("add", LayerKind::Add, &["conv2", "proj"])));
        } else {
            parts.push(conv("conv2", "relu1", 8, 4));
            parts.push(plain(Layer::new("add", LayerKind::Add, &["conv2", "in"])));
        }
        parts.push(plain(Layer::new("relu2", LayerKind::ReLU, &["add"])));
        parts.push(plain(Layer::new("out", LayerKind::Output, &["relu2"])));
        build(parts)
    }

    #[test]
    fn projection_block_has_three_groups() {
        let groups = build_channel_groups(&basic_block(true)).unwrap();
        assert_eq!(groups.len(), 3);
        let names = |g: &ChannelGroup| g.members.iter().map(|p| p.to_string()).collect::<Vec<_>>();
        assert_eq!(names(&groups[0]), ["conv1.in", "proj.in"]);
        assert_eq!(names(&groups[1]), ["conv1.out", "conv2.in"]);
        assert_eq!(names(&groups[2]), ["proj.out", "conv2.out"]);
        assert_eq!(
            groups.iter().map(|g| g.size).collect::<Vec<_>>(),
            [4, 8, 16]
        );
        assert!(!groups[0].prunable);
        assert!(groups[1].prunable);
        // add output reaches Output directly
        assert!(!groups[2].prunable);
    }

    #[test]
    fn identity_shortcut_merges_input_and_add_groups() {
        let groups = build_channel_groups(&basic_block(false)).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members.len(), 2);
        assert_eq!(groups[1].members.len(), 2);
    }

    #[test]
    fn dense_chain_groups() {
        let m = dense_chain();
        let groups = build_channel_groups(&m).unwrap();
        assert_eq!(groups.iter().map(|g| g.size).collect::<Vec<_>>(), [4, 8, 6, 3]);
        assert_eq!(
            groups.iter().map(|g| g.prunable).collect::<Vec<_>>(),
            [false, true, true, false]
        );
        assert_eq!(signature_of(&m, &groups), Signature::new(vec![4, 8, 6, 3]));
        assert_eq!(signature_of(&m, &groups), signature_of(&m.clone(), &groups));
    }

    #[test]
    fn every_parametric_port_in_exactly_one_group() {
        for m in [dense_chain(), basic_block(true), basic_block(false)] {
            let groups = build_channel_groups(&m).unwrap();
            let parametric = m.layers.iter().filter(|l| l.kind.is_parametric()).count();
            let total: usize = groups.iter().map(|g| g.members.len()).sum();
            assert_eq!(total, 2 * parametric);
            for l in m.layers.iter().filter(|l| l.kind.is_parametric()) {
                for port in [Port::Input, Port::Output] {
                    let hits = groups
                        .iter()
                        .filter(|g| g.members.iter().any(|p| p.layer == l.id && p.port == port))
                        .count();
                    assert_eq!(hits, 1);
                }
            }
        }
    }

    #[test]
    fn group_indices_follow_topological_first_appearance() {
        // Two parallel dense branches merged by an add; ids chosen so that
        // lexicographic order differs from insertion order.
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![3] }, &[])),
            dense("zz", "in", 3, 5, false),
            dense("aa", "in", 3, 7, false),
            dense("aa2", "aa", 7, 5, false),
            plain(Layer::new("sum", LayerKind::Add, &["aa2", "zz"])),
            dense("head", "sum", 5, 2, false),
            plain(Layer::new("out", LayerKind::Output, &["head"])),
        ]);
        let groups = build_channel_groups(&m).unwrap();
        let anchors: Vec<_> = groups.iter().map(|g| g.anchor.as_str()).collect();
        assert_eq!(anchors, ["in", "aa", "aa2", "head"]);
        assert_eq!(groups[2].size, 5);
        assert_eq!(groups[2].members.len(), 3);
    }
}
