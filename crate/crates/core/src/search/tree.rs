use std::collections::HashMap;

use serde::Serialize;

use crate::graph::{ModelGraph, Signature};

#[derive(Clone, Debug, Serialize)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    /// Step that created the node; 0 for the root.
    pub step: usize,
    pub signature: Signature,
    /// Remaining channels of each group, as ascending root channel indices.
    pub kept: Vec<Vec<usize>>,
    /// Importance lost relative to the parent.
    pub delta: f64,
    /// Importance lost since the root.
    pub cumulative: f64,
    /// Latency measured when the node was created.
    pub latency: f64,
    pub alive: bool,
    /// Present while the node is alive.
    #[serde(skip)]
    pub model: Option<ModelGraph>,
}

/// Every node admitted so far plus the alive set.
#[derive(Clone, Debug, Default)]
pub struct Tree {
    nodes: Vec<Node>,
    alive: Vec<usize>,
    registry: HashMap<Signature, usize>,
}

impl Tree {
    pub fn with_root(model: ModelGraph, signature: Signature, latency: f64) -> Self {
        let kept = signature.counts().iter().map(|&c| (0..c).collect()).collect();
        let mut tree = Self::default();
        tree.admit(Node {
            id: 0,
            parent: None,
            step: 0,
            signature,
            kept,
            delta: 0.0,
            cumulative: 0.0,
            latency,
            alive: true,
            model: Some(model),
        });
        tree
    }

    /// Adds an alive node, assigning its id. Returns `None` if the signature
    /// is already in the tree.
    pub(crate) fn admit(&mut self, mut node: Node) -> Option<usize> {
        if self.registry.contains_key(&node.signature) {
            return None;
        }
        let id = self.nodes.len();
        node.id = id;
        node.alive = true;
        self.registry.insert(node.signature.clone(), id);
        self.alive.push(id);
        self.nodes.push(node);
        Some(id)
    }

    pub(crate) fn kill(&mut self, id: usize) {
        let node = &mut self.nodes[id];
        node.alive = false;
        node.model = None;
        self.alive.retain(|&a| a != id);
    }

    pub fn contains(&self, signature: &Signature) -> bool {
        self.registry.contains_key(signature)
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn alive(&self) -> &[usize] {
        &self.alive
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }
}
