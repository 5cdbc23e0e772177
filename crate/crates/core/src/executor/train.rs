use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, loss_and_grads, BatchSampler, GradientStore, Split};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batches_per_step: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            batches_per_step: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batches_per_step == 0 {
            return Err(Error::InvalidArgument(
                "batch size and batches per step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `w <- w - lr * g` for every tensor with a gradient.
pub fn sgd_step(model: &mut ModelGraph, grads: &GradientStore, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let t = model
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown tensor `{name}`")))?;
        if t.data.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has {} values, tensor has {}",
                g.len(),
                t.data.len()
            )));
        }
    }
    for (name, g) in grads.iter() {
        let t = model.tensors.get_mut(name).expect("checked above");
        for (w, &gi) in t.data.iter_mut().zip(g) {
            if gi != 0.0 {
                *w = (*w as f64 - lr * gi) as f32;
            }
        }
    }
    Ok(())
}

/// Runs `batches` mini-batches. `observe` sees the weights and gradients of
/// each batch before the update; with `update == false` weights stay fixed.
pub fn fine_tune(
    model: &mut ModelGraph,
    split: &Split,
    cfg: &TrainConfig,
    batches: usize,
    seed: u64,
    update: bool,
    mut observe: impl FnMut(&ModelGraph, &GradientStore) -> Result<()>,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot train on an empty split".into()));
    }
    let mut sampler = BatchSampler::new(split.len(), seed);
    let mut total = 0.0;
    for _ in 0..batches {
        let batch = split.batch(&sampler.next_indices(cfg.batch_size))?;
        let (loss, grads) = loss_and_grads(model, &batch)?;
        observe(model, &grads)?;
        if update {
            sgd_step(model, &grads, cfg.learning_rate)?;
        }
        total += loss;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Fraction of argmax-correct predictions; ties go to the lowest class.
pub fn evaluate(model: &ModelGraph, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let indices: Vec<usize> = (0..split.len()).collect();
    for part in indices.chunks(chunk) {
        let batch = split.batch(part)?;
        let (logits, _) = forward(model, &batch)?;
        let classes = logits.len() / batch.len();
        for (row, &y) in logits.chunks(classes).zip(&batch.labels) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and bias.
pub fn init_uniform(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = model.layers.clone();
    for layer in &layers {
        let fan_in = match layer.kind {
            LayerKind::Dense { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel[0] * kernel[1],
            _ => continue,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for name in layer.weight_names() {
            if let Some(t) = model.tensors.get_mut(name) {
                for v in &mut t.data {
                    *v = rng.random_range(-bound..=bound) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, dense, plain};
    use crate::graph::{Layer, TensorSpec};

    fn one_weight() -> ModelGraph {
        let mut fc = Layer::new(
            "fc",
            LayerKind::Dense {
                in_features: 1,
                out_features: 1,
            },
            &["in"],
        );
        fc.weight = Some("w".into());
        build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![1] }, &[])),
            (fc, vec![TensorSpec::new("w", vec![1, 1], vec![1.0])]),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ])
    }

    #[test]
    fn sgd_updates() {
        let mut m = one_weight();
        let mut g = GradientStore::default();
        g.insert("w", vec![0.5]);
        sgd_step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m.tensors["w"].data[0], 0.95f32);

        let before = m.clone();
        g.insert("w", vec![0.0]);
        sgd_step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m.tensors["w"].data[0].to_bits(), before.tensors["w"].data[0].to_bits());

        g.insert("w", vec![0.3]);
        sgd_step(&mut m, &g, 0.0).unwrap();
        sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);

        g.insert("w", vec![0.3, 0.1]);
        assert!(matches!(sgd_step(&mut m, &g, 0.1), Err(Error::Shape(_))));
    }

    fn two_class_model(weights: Vec<f32>) -> ModelGraph {
        let mut m = build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![2] }, &[])),
            dense("fc", "in", 2, 2, false),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ]);
        m.tensors.get_mut("fc.weight").unwrap().data = weights;
        m
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let x: Vec<f32> = (0..10).flat_map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let split = Split { features: 2, x, y };
        assert_eq!(evaluate(&two_class_model(vec![1.0, 0.0, 0.0, 1.0]), &split).unwrap(), 1.0);
        let constant = two_class_model(vec![0.0; 4]);
        let a = evaluate(&constant, &split).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(a, evaluate(&constant, &split).unwrap());
        let empty = Split {
            features: 2,
            x: vec![],
            y: vec![],
        };
        assert!(evaluate(&constant, &empty).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = super::super::data::generate_blobs(&super::super::BlobsConfig::new(1, 2, 2, 64)).unwrap();
        let mut a = two_class_model(vec![0.1, -0.2, 0.3, 0.05]);
        let mut b = a.clone();
        let cfg = TrainConfig::default();
        let first = fine_tune(&mut a, &data, &cfg, 1, 9, false, |_, _| Ok(())).unwrap();
        let mean = fine_tune(&mut a, &data, &cfg, 30, 9, true, |_, _| Ok(())).unwrap();
        fine_tune(&mut b, &data, &cfg, 1, 9, false, |_, _| Ok(())).unwrap();
        fine_tune(&mut b, &data, &cfg, 30, 9, true, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert!(mean < first);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut m = two_class_model(vec![0.0; 4]);
        init_uniform(&mut m, 3);
        let bound = 1.0 / 2f32.sqrt();
        assert!(m.tensors["fc.weight"].data.iter().all(|v| v.abs() <= bound));
        assert!(m.tensors["fc.weight"].data.iter().any(|v| *v != 0.0));
    }
}
