//! Central finite-difference check of executor gradients in f64.
//!
//! Finite differences are only meaningful where the loss is smooth over the
//! perturbation interval. An instance is redrawn when any `+-STEP` perturbation
//! flips a ReLU sign or moves a max-pool winner.

use latprune::executor::{cross_entropy, forward_with_params, loss_and_grads, params_of, Activations, Batch, Params};
use latprune::graph::{LayerKind, ModelGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a model from a seed.
pub type Build = Box<dyn Fn(u64) -> ModelGraph>;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

pub fn random_batch(model: &ModelGraph, n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Batch {
    let shapes = model.infer_shapes().unwrap();
    let per = shapes["input"].numel();
    let x = (0..n * per).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, y).unwrap()
}

/// ReLU signs and max-pool argmax positions.
pub fn kink_pattern(model: &ModelGraph, acts: &Activations) -> Vec<usize> {
    let shapes = model.infer_shapes().unwrap();
    let mut pattern = Vec::new();
    for layer in &model.layers {
        let Some(src) = layer.inputs.first() else { continue };
        let x = acts.of(model, src).unwrap();
        match layer.kind {
            LayerKind::ReLU => pattern.extend(x.iter().map(|v| (*v > 0.0) as usize)),
            LayerKind::MaxPool2d { window, stride } => {
                let (h, w) = shapes[src].spatial.unwrap();
                let (ho, wo) = shapes[&layer.id].spatial.unwrap();
                for plane in x.chunks(h * w) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let at = |k: usize| plane[(oy * stride + k / window) * w + ox * stride + k % window];
                            let mut best = 0;
                            for k in 1..window * window {
                                if at(k) > at(best) {
                                    best = k;
                                }
                            }
                            pattern.push(best);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

pub fn eval(model: &ModelGraph, params: &Params, batch: &Batch, classes: usize) -> (f64, Vec<usize>) {
    let (logits, acts) = forward_with_params(model, params, batch).unwrap();
    (cross_entropy(&logits, &batch.labels, classes), kink_pattern(model, &acts))
}

/// Max relative error |g - fd| / max(|g|, |fd|, 1e-6), or `None` when some
/// perturbation crosses a kink.
pub fn max_relative_error(model: &ModelGraph, batch: &Batch, classes: usize) -> Option<f64> {
    let (_, grads) = loss_and_grads(model, batch).unwrap();
    let base = params_of(model);
    let (_, pattern) = eval(model, &base, batch, classes);
    let mut worst: f64 = 0.0;
    for (name, values) in &base {
        let analytic = grads.get(name).unwrap();
        for k in 0..values.len() {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap()[k] += STEP;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap()[k] -= STEP;
            let (lp, pp) = eval(model, &plus, batch, classes);
            let (lm, pm) = eval(model, &minus, batch, classes);
            if pp != pattern || pm != pattern {
                return None;
            }
            let fd = (lp - lm) / (2.0 * STEP);
            let g = analytic[k];
            let denom = g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Some(worst)
}

pub fn checked_error(build: &dyn Fn(u64) -> ModelGraph, classes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let model = build(rng.random());
        let batch = random_batch(&model, 2, classes, &mut rng);
        if let Some(err) = max_relative_error(&model, &batch, classes) {
            return err;
        }
    }
    panic!("no kink-free instance for seed {seed}");
}

