use std::collections::BTreeSet;

use super::{ChannelGroups, LayerKind, ModelGraph, Port};
use crate::error::{Error, Result};

/// Keeps only the `keep` indices along `axis` of a row-major tensor.
pub fn select_axis(shape: &[usize], data: &[f32], axis: usize, keep: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * extent + k) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    (new_shape, out)
}

/// Removes `channels` (indices relative to `model`) from every port of group
/// `group_index` and returns the smaller model. `model` is left untouched.
pub fn apply_pruning(
    model: &ModelGraph,
    groups: &ChannelGroups,
    group_index: usize,
    channels: &[usize],
) -> Result<ModelGraph> {
    let group = groups
        .get(group_index)
        .ok_or_else(|| Error::InvalidPruning(format!("no channel group {group_index}")))?;
    if !group.prunable {
        return Err(Error::NotPrunable(group_index));
    }
    let current = super::signature_of(model, groups).get(group_index);
    let removed: BTreeSet<usize> = channels.iter().copied().collect();
    if removed.len() != channels.len() {
        return Err(Error::InvalidPruning("duplicate channel index".into()));
    }
    if let Some(&bad) = removed.iter().find(|&&c| c >= current) {
        return Err(Error::InvalidPruning(format!(
            "channel {bad} out of range for group {group_index} of size {current}"
        )));
    }
    if removed.len() >= current {
        return Err(Error::InvalidPruning(format!(
            "cannot remove all {current} channels of group {group_index}"
        )));
    }
    let keep: Vec<usize> = (0..current).filter(|c| !removed.contains(c)).collect();

    let mut pruned = model.clone();
    for member in &group.members {
        let layer = pruned
            .layer_mut(&member.layer)
            .ok_or_else(|| Error::InvalidPruning(format!("group member `{}` missing", member.layer)))?;
        let axis = match member.port {
            Port::Output => 0,
            Port::Input => 1,
        };
        match &mut layer.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => match member.port {
                Port::Input => *in_features = keep.len(),
                Port::Output => *out_features = keep.len(),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => match member.port {
                Port::Input => *in_channels = keep.len(),
                Port::Output => *out_channels = keep.len(),
            },
            other => {
                return Err(Error::UnsupportedLayer(other.name().to_string()));
            }
        }
        let mut owned = vec![(layer.weight.clone(), axis)];
        if member.port == Port::Output {
            owned.push((layer.bias.clone(), 0));
        }
        for (name, axis) in owned {
            let Some(name) = name else { continue };
            let tensor = pruned
                .tensors
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidPruning(format!("tensor `{name}` missing")))?;
            let (shape, data) = select_axis(&tensor.shape, &tensor.data, axis, &keep);
            tensor.shape = shape;
            tensor.data = data;
        }
    }

    let violations = pruned.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations));
    }
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, dense, dense_chain, plain};
    use crate::graph::{build_channel_groups, signature_of, Layer, Signature, TensorSpec};

    #[test]
    fn dense_input_columns_removed() {
        let m = dense_chain();
        let groups = build_channel_groups(&m).unwrap();
        // fc2 is Dense(8 -> 6), weight (6, 8); its input port is in group 1.
        let before = m.tensor("fc2.weight").unwrap().clone();
        let p = apply_pruning(&m, &groups, 1, &[1, 3]).unwrap();
        let w = p.tensor("fc2.weight").unwrap();
        assert_eq!(w.shape, [6, 6]);
        for r in 0..6 {
            let expect: Vec<f32> = (0..8)
                .filter(|c| *c != 1 && *c != 3)
                .map(|c| before.data[r * 8 + c])
                .collect();
            assert_eq!(&w.data[r * 6..r * 6 + 6], expect.as_slice());
        }
        // fc1's rows and bias shrink with the same group
        assert_eq!(p.tensor("fc1.weight").unwrap().shape, [6, 4]);
        assert_eq!(p.tensor("fc1.bias").unwrap().data.len(), 6);
        assert_eq!(signature_of(&p, &groups), Signature::new(vec![4, 6, 6, 3]));
        // source untouched
        assert_eq!(m.tensor("fc2.weight").unwrap(), &before);
    }

    #[test]
    fn conv_output_and_bias_removed() {
        let mut conv = Layer::new(
            "conv",
            LayerKind::Conv2d {
                in_channels: 3,
                out_channels: 16,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
            },
            &["in"],
        );
        conv.weight = Some("conv.weight".into());
        conv.bias = Some("conv.bias".into());
        let m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![3, 5, 5] }, &[])),
            (
                conv,
                vec![
                    TensorSpec::new("conv.weight", vec![16, 3, 3, 3], (0..16 * 27).map(|v| v as f32).collect()),
                    TensorSpec::new("conv.bias", vec![16], (0..16).map(|v| v as f32).collect()),
                ],
            ),
            plain(Layer::new("gap", LayerKind::GlobalAvgPool, &["conv"])),
            dense("fc", "gap", 16, 2, false),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ]);
        let groups = build_channel_groups(&m).unwrap();
        let p = apply_pruning(&m, &groups, 1, &[0]).unwrap();
        let w = p.tensor("conv.weight").unwrap();
        assert_eq!(w.shape, [15, 3, 3, 3]);
        assert_eq!(w.data[0], 27.0);
        assert_eq!(p.tensor("conv.bias").unwrap().data.len(), 15);
        assert_eq!(p.tensor("conv.bias").unwrap().data[0], 1.0);
        assert_eq!(p.tensor("fc.weight").unwrap().shape, [2, 15]);
    }

    #[test]
    fn errors() {
        let m = dense_chain();
        let groups = build_channel_groups(&m).unwrap();
        assert!(matches!(apply_pruning(&m, &groups, 0, &[0]), Err(Error::NotPrunable(0))));
        assert!(matches!(apply_pruning(&m, &groups, 3, &[0]), Err(Error::NotPrunable(3))));
        assert!(apply_pruning(&m, &groups, 1, &(0..8).collect::<Vec<_>>()).is_err());
        assert!(apply_pruning(&m, &groups, 1, &[8]).is_err());
        assert!(apply_pruning(&m, &groups, 1, &[2, 2]).is_err());
        assert!(apply_pruning(&m, &groups, 9, &[0]).is_err());
    }
}
