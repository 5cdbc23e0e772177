//! Latency oracles.
//!
//! A provider answers "how long does this whole model take" for one pruned
//! architecture. Providers never combine per-layer numbers from separate
//! measurements; the analytical model is a closed-form stand-in for a device.

mod analytical;
mod external;
mod replay;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Signature};

pub use analytical::{AnalyticalParams, AnalyticalProvider};
pub use external::{parse_latency_output, ExternalProvider, DEFAULT_TIMEOUT};
pub(crate) use replay::write_header;
pub use replay::{parse_records, write_record, RecordFile, ReplayProvider, ReplayTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Median,
    Mean,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregate::Median => "median",
            Aggregate::Mean => "mean",
        })
    }
}

/// How a device benchmark is run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkProtocol {
    pub warmup_iters: u32,
    pub measure_iters: u32,
    pub aggregate: Aggregate,
}

impl BenchmarkProtocol {
    /// Used for every measurement taken while searching.
    pub const EXPLORATION: Self = Self {
        warmup_iters: 100,
        measure_iters: 300,
        aggregate: Aggregate::Median,
    };

    /// Used for the root and for the returned models.
    pub const FINAL: Self = Self {
        warmup_iters: 1000,
        measure_iters: 10_000,
        aggregate: Aggregate::Mean,
    };

    pub fn check(&self) -> Result<()> {
        if self.measure_iters == 0 {
            return Err(Error::InvalidArgument("measure_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// A latency oracle for whole models.
///
/// `model` is the pruned model whose channel counts are `signature`.
/// Implementations must return a positive, finite number of milliseconds.
pub trait LatencyProvider: Send + Sync {
    fn measure(&self, model: &ModelGraph, signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64>;

    /// Stable description of the provider configuration, part of the cache key.
    fn fingerprint(&self) -> String;

    /// False when `measure` only looks at the signature.
    fn needs_model(&self) -> bool {
        true
    }
}

impl<P: LatencyProvider + ?Sized> LatencyProvider for Box<P> {
    fn measure(&self, model: &ModelGraph, signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64> {
        (**self).measure(model, signature, protocol)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }

    fn needs_model(&self) -> bool {
        (**self).needs_model()
    }
}

pub(crate) fn check_latency(ms: f64) -> Result<f64> {
    if ms.is_finite() && ms > 0.0 {
        Ok(ms)
    } else {
        Err(Error::Provider(format!("latency must be positive and finite, got {ms}")))
    }
}

/// Counts calls into the wrapped provider.
pub struct CountingProvider<'a> {
    inner: &'a dyn LatencyProvider,
    calls: AtomicUsize,
}

impl<'a> CountingProvider<'a> {
    pub fn new(inner: &'a dyn LatencyProvider) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LatencyProvider for CountingProvider<'_> {
    fn measure(&self, model: &ModelGraph, signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.measure(model, signature, protocol)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn needs_model(&self) -> bool {
        self.inner.needs_model()
    }
}

/// Multiplies every measurement by `1 + sigma * N(0, 1)`, clamped positive.
/// For robustness experiments only.
pub struct NoisyProvider<P> {
    inner: P,
    sigma: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl<P: LatencyProvider> NoisyProvider<P> {
    pub fn new(inner: P, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
        }
        Ok(Self {
            inner,
            sigma,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }
}

impl<P: LatencyProvider> LatencyProvider for NoisyProvider<P> {
    fn measure(&self, model: &ModelGraph, signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64> {
        let ms = self.inner.measure(model, signature, protocol)?;
        if self.sigma == 0.0 {
            return Ok(ms);
        }
        let z: f64 = Normal::new(0.0, 1.0)
            .expect("unit normal")
            .sample(&mut *self.rng.lock().unwrap_or_else(|e| e.into_inner()));
        Ok(ms * (1.0 + self.sigma * z).max(1e-3))
    }

    fn fingerprint(&self) -> String {
        format!("{}+noise({})", self.inner.fingerprint(), self.sigma)
    }

    fn needs_model(&self) -> bool {
        self.inner.needs_model()
    }
}

/// Textual provider selection: `analytical`, `analytical:align=8,slant=0.2`,
/// `replay:<file>` or `command:<template>`.
#[derive(Clone, Debug, PartialEq)]
pub enum ProviderSpec {
    Analytical(AnalyticalParams),
    Replay(PathBuf),
    Command(String),
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn LatencyProvider>> {
        Ok(match self {
            ProviderSpec::Analytical(p) => Box::new(AnalyticalProvider::new(p.clone())?),
            ProviderSpec::Replay(path) => Box::new(ReplayProvider::load(path)?),
            ProviderSpec::Command(t) => Box::new(ExternalProvider::new(t.clone())?),
        })
    }
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        match (kind, rest) {
            ("analytical", None) => Ok(ProviderSpec::Analytical(AnalyticalParams::default())),
            ("analytical", Some(params)) => Ok(ProviderSpec::Analytical(params.parse()?)),
            ("replay", Some(path)) if !path.is_empty() => Ok(ProviderSpec::Replay(PathBuf::from(path))),
            ("command", Some(t)) if !t.trim().is_empty() => Ok(ProviderSpec::Command(t.to_string())),
            _ => Err(Error::InvalidArgument(format!(
                "provider must be `analytical`, `replay:<file>` or `command:<template>`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Analytical(p) if *p == AnalyticalParams::default() => f.write_str("analytical"),
            ProviderSpec::Analytical(p) => write!(f, "analytical:{p}"),
            ProviderSpec::Replay(path) => write!(f, "replay:{}", path.display()),
            ProviderSpec::Command(t) => write!(f, "command:{t}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_spec_parsing() {
        assert_eq!(
            "analytical".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Analytical(AnalyticalParams::default())
        );
        let spec: ProviderSpec = "analytical:align=4,slant=0".parse().unwrap();
        let ProviderSpec::Analytical(p) = &spec else { panic!() };
        assert_eq!((p.align, p.slant), (4, 0.0));
        assert_eq!(spec.to_string().parse::<ProviderSpec>().unwrap(), spec);
        assert_eq!(
            "replay:t.jsonl".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Replay("t.jsonl".into())
        );
        assert_eq!(
            "command:bench {model_path}".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Command("bench {model_path}".into())
        );
        for bad in ["", "replay:", "command:", "gpu", "analytical:align=0", "analytical:nope=1"] {
            assert!(bad.parse::<ProviderSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn noise_is_off_at_zero_sigma() {
        let model = crate::toy::mlp(4, &[8], 2, 0);
        let groups = crate::graph::build_channel_groups(&model).unwrap();
        let sig = groups.root_signature();
        let base = AnalyticalProvider::default();
        let clean = base.measure(&model, &sig, &BenchmarkProtocol::EXPLORATION).unwrap();
        let quiet = NoisyProvider::new(AnalyticalProvider::default(), 0.0, 1).unwrap();
        assert_eq!(quiet.measure(&model, &sig, &BenchmarkProtocol::EXPLORATION).unwrap(), clean);
        let noisy = NoisyProvider::new(AnalyticalProvider::default(), 0.1, 1).unwrap();
        let values: Vec<f64> = (0..20)
            .map(|_| noisy.measure(&model, &sig, &BenchmarkProtocol::EXPLORATION).unwrap())
            .collect();
        assert!(values.iter().all(|v| *v > 0.0));
        assert!(values.iter().any(|v| *v != clean));
        assert!(NoisyProvider::new(AnalyticalProvider::default(), -1.0, 1).is_err());
    }

    #[test]
    fn protocols() {
        assert_eq!(BenchmarkProtocol::EXPLORATION.measure_iters, 300);
        assert_eq!(BenchmarkProtocol::FINAL.warmup_iters, 1000);
        let bad = BenchmarkProtocol {
            measure_iters: 0,
            ..BenchmarkProtocol::FINAL
        };
        assert!(bad.check().is_err());
    }
}
