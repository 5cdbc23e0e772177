use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_latency, BenchmarkProtocol, LatencyProvider};
use crate::error::{Error, Result};
use crate::graph::{build_channel_groups, signature_of, LayerKind, ModelGraph, Signature};

/// Cost model parameters. Work units are multiply-accumulates with channel
/// counts rounded up to the alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticalParams {
    /// Channel alignment of the simulated kernels.
    pub align: usize,
    /// Weight of the unaligned (linear) term, in `[0, 1]`.
    pub slant: f64,
    /// ms per unit of dense work.
    pub dense_cost: f64,
    /// ms per unit of convolution work.
    pub conv_cost: f64,
    /// Fixed ms per Dense/Conv2d layer.
    pub layer_overhead: f64,
    /// Fixed ms per model.
    pub base: f64,
}

impl Default for AnalyticalParams {
    fn default() -> Self {
        Self {
            align: 8,
            slant: 0.2,
            dense_cost: 1e-4,
            conv_cost: 1e-5,
            layer_overhead: 1e-3,
            base: 1e-2,
        }
    }
}

impl AnalyticalParams {
    pub fn check(&self) -> Result<()> {
        let costs = [self.dense_cost, self.conv_cost, self.layer_overhead, self.base];
        if self.align == 0 || !(0.0..=1.0).contains(&self.slant) || costs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid analytical parameters {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for AnalyticalParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "align={},slant={},dense_cost={},conv_cost={},layer_overhead={},base={}",
            self.align, self.slant, self.dense_cost, self.conv_cost, self.layer_overhead, self.base
        )
    }
}

impl FromStr for AnalyticalParams {
    type Err = Error;

    /// Comma-separated `key=value` overrides of the defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut p = Self::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{part}`")))?;
            let bad = || Error::InvalidArgument(format!("bad value for `{key}`: `{value}`"));
            let float = || value.trim().parse::<f64>().map_err(|_| bad());
            match key.trim() {
                "align" => p.align = value.trim().parse().map_err(|_| bad())?,
                "slant" => p.slant = float()?,
                "dense_cost" => p.dense_cost = float()?,
                "conv_cost" => p.conv_cost = float()?,
                "layer_overhead" => p.layer_overhead = float()?,
                "base" => p.base = float()?,
                other => return Err(Error::InvalidArgument(format!("unknown analytical parameter `{other}`"))),
            }
        }
        p.check()?;
        Ok(p)
    }
}

/// Closed-form latency with alignment staircases:
/// `base + sum(layer_overhead + cost * work)` over Dense/Conv2d layers, where
/// `work = (slant*o*i + (1-slant)*a^2*ceil(o/a)*ceil(i/a)) * spatial` and
/// `spatial = H_out*W_out*kh*kw` for convolutions, 1 for dense layers.
#[derive(Clone, Debug, Default)]
pub struct AnalyticalProvider {
    params: AnalyticalParams,
}

impl AnalyticalProvider {
    pub fn new(params: AnalyticalParams) -> Result<Self> {
        params.check()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &AnalyticalParams {
        &self.params
    }

    /// Latency of `model` as given, without a signature check.
    pub fn latency_of(&self, model: &ModelGraph) -> Result<f64> {
        let shapes = model.infer_shapes().map_err(crate::Error::InvalidModel)?;
        let p = &self.params;
        let a = p.align as f64;
        let mut total = p.base;
        for layer in &model.layers {
            let (c_in, c_out, spatial, cost) = match &layer.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => (*in_features, *out_features, 1.0, p.dense_cost),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let (h, w) = shapes[&layer.id].spatial.unwrap_or((1, 1));
                    let spatial = (h * w * kernel[0] * kernel[1]) as f64;
                    (*in_channels, *out_channels, spatial, p.conv_cost)
                }
                _ => continue,
            };
            let (i, o) = (c_in as f64, c_out as f64);
            let aligned = a * a * (c_out.div_ceil(p.align) as f64) * (c_in.div_ceil(p.align) as f64);
            let work = (p.slant * o * i + (1.0 - p.slant) * aligned) * spatial;
            total += p.layer_overhead + cost * work;
        }
        Ok(total)
    }
}

impl LatencyProvider for AnalyticalProvider {
    fn measure(&self, model: &ModelGraph, signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64> {
        protocol.check()?;
        let groups = build_channel_groups(model)?;
        let actual = signature_of(model, &groups);
        if &actual != signature {
            return Err(Error::InvalidArgument(format!(
                "signature {signature} does not match model channels {actual}"
            )));
        }
        check_latency(self.latency_of(model)?)
    }

    fn fingerprint(&self) -> String {
        format!("analytical:{}", self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, dense, plain};
    use crate::graph::{apply_pruning, Layer};

    fn flat_params(align: usize, slant: f64) -> AnalyticalParams {
        AnalyticalParams {
            align,
            slant,
            dense_cost: 1e-3,
            conv_cost: 1e-3,
            layer_overhead: 0.0,
            base: 0.0,
        }
    }

    fn single_dense(i: usize, o: usize) -> ModelGraph {
        build(vec![
            plain(Layer::new("in", LayerKind::Input { shape: vec![i] }, &[])),
            dense("fc", "in", i, o, true),
            plain(Layer::new("out", LayerKind::Output, &["fc"])),
        ])
    }

    #[test]
    fn aligned_dense_layer() {
        let p = AnalyticalProvider::new(flat_params(8, 0.0)).unwrap();
        let ms = p.latency_of(&single_dense(8, 8)).unwrap();
        assert!((ms - 0.064).abs() < 1e-12, "{ms}");
    }

    #[test]
    fn flat_staircase_step() {
        let p = AnalyticalProvider::new(flat_params(8, 0.0)).unwrap();
        let a = p.latency_of(&single_dense(9, 8)).unwrap();
        let b = p.latency_of(&single_dense(16, 8)).unwrap();
        assert_eq!(a, b);
        assert!(p.latency_of(&single_dense(17, 8)).unwrap() > b);
    }

    #[test]
    fn conv_spatial_factor() {
        let model = crate::toy::conv_net([2, 6, 6], &[8], 2, 0);
        let p = AnalyticalProvider::new(flat_params(8, 0.0)).unwrap();
        // conv1: 8 out, 2 in (one aligned block each), 6x6 output, 3x3 kernel;
        // head: 2 out, 8 in (one aligned block each).
        let expect = 1e-3 * 64.0 * 36.0 * 9.0 + 1e-3 * 64.0;
        assert!((p.latency_of(&model).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn slanted_sweep_over_one_group() {
        let root = crate::toy::mlp(16, &[64], 4, 0);
        let groups = build_channel_groups(&root).unwrap();
        let p = AnalyticalProvider::default();
        let align = p.params().align;
        let curve: Vec<f64> = (1..=64usize)
            .map(|c| {
                let pruned = apply_pruning(&root, &groups, 1, &(c..64).collect::<Vec<_>>()).unwrap();
                let sig = signature_of(&pruned, &groups);
                assert_eq!(sig.get(1), c);
                p.measure(&pruned, &sig, &BenchmarkProtocol::EXPLORATION).unwrap()
            })
            .collect();
        let diffs: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(diffs.iter().all(|d| *d > 0.0));
        let small = diffs[1];
        for (k, d) in diffs.iter().enumerate() {
            // diffs[k] is the cost of going from k+1 to k+2 channels.
            let crosses = (k + 1) % align == 0;
            if crosses {
                assert!(*d > 2.0 * small, "no jump after {} channels", k + 1);
            } else {
                assert!((d - small).abs() < 1e-12, "unexpected jump after {} channels", k + 1);
            }
        }
    }

    #[test]
    fn signature_must_match() {
        let model = single_dense(4, 3);
        let p = AnalyticalProvider::default();
        let err = p.measure(&model, &Signature::new(vec![4, 2]), &BenchmarkProtocol::FINAL);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(p.measure(&model, &Signature::new(vec![4, 3]), &BenchmarkProtocol::FINAL).unwrap() > 0.0);
    }

    #[test]
    fn parameter_parsing() {
        let p: AnalyticalParams = "align=4, slant=0.5".parse().unwrap();
        assert_eq!((p.align, p.slant), (4, 0.5));
        assert_eq!(p.to_string().parse::<AnalyticalParams>().unwrap(), p);
        assert!("slant=2".parse::<AnalyticalParams>().is_err());
        assert!("base=-1".parse::<AnalyticalParams>().is_err());
        assert!("align".parse::<AnalyticalParams>().is_err());
    }
}
