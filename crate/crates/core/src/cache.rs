//! Persistent signature -> latency memoization.
//!
//! The backing file is a replay table preceded by a fingerprint header, so a
//! cache file can also be used directly as a replay provider.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{manifest_fingerprint, ModelGraph, Signature};
use crate::latency::{parse_records, write_header, write_record, BenchmarkProtocol, LatencyProvider};

/// Cache key scope: the root architecture plus the provider configuration.
pub fn cache_fingerprint(root: &ModelGraph, provider: &dyn LatencyProvider) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(manifest_fingerprint(root)?);
    hasher.update(b"\n");
    hasher.update(provider.fingerprint());
    Ok(hex::encode(hasher.finalize()))
}

/// `cache.jsonl` -> `cache.jsonl.events.csv`.
pub fn events_path(cache_path: &Path) -> PathBuf {
    let mut name = cache_path.as_os_str().to_owned();
    name.push(".events.csv");
    PathBuf::from(name)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub hit_rate: f64,
}

impl CacheStats {
    pub fn from_counts(hits: usize, misses: usize) -> Self {
        let total = hits + misses;
        Self {
            hits,
            misses,
            hit_rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        }
    }

    pub fn from_events(events: &[CacheEvent]) -> Self {
        let hits = events.iter().filter(|e| e.hit).count();
        Self::from_counts(hits, events.len() - hits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub query: usize,
    pub signature: Signature,
    pub hit: bool,
    pub ms: f64,
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    query: usize,
    signature: String,
    outcome: String,
    ms: f64,
}

pub fn write_events_csv(events: &[CacheEvent], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["query", "signature", "outcome", "ms"]).map_err(csv_error)?;
    for e in events {
        out.serialize(EventRow {
            query: e.query,
            signature: e.signature.counts().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
            outcome: if e.hit { "hit" } else { "miss" }.into(),
            ms: e.ms,
        })
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events_csv(r: impl std::io::Read) -> Result<Vec<CacheEvent>> {
    let mut events = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize::<EventRow>() {
        let row = row.map_err(csv_error)?;
        let counts = row
            .signature
            .split_whitespace()
            .map(|c| c.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("event signature `{}`: {e}", row.signature)))?;
        let hit = match row.outcome.as_str() {
            "hit" => true,
            "miss" => false,
            other => return Err(Error::Format(format!("unknown cache outcome `{other}`"))),
        };
        events.push(CacheEvent {
            query: row.query,
            signature: Signature::new(counts),
            hit,
            ms: row.ms,
        });
    }
    Ok(events)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Default)]
struct State {
    entries: HashMap<Signature, f64>,
    events: Vec<CacheEvent>,
    hits: usize,
    misses: usize,
    file: Option<File>,
}

impl State {
    fn hit(&mut self, signature: &Signature) -> Option<f64> {
        let ms = *self.entries.get(signature)?;
        self.hits += 1;
        self.record(signature, true, ms);
        Some(ms)
    }

    fn record(&mut self, signature: &Signature, hit: bool, ms: f64) {
        let query = self.events.len();
        self.events.push(CacheEvent {
            query,
            signature: signature.clone(),
            hit,
            ms,
        });
    }
}

/// Memoizes provider measurements. Safe to share between threads: concurrent
/// misses on one signature trigger a single provider call, and provider calls
/// never overlap.
pub struct LatencyCache {
    state: Mutex<State>,
    measuring: Mutex<()>,
    fingerprint: String,
    path: Option<PathBuf>,
}

impl LatencyCache {
    pub fn in_memory(fingerprint: impl Into<String>) -> Self {
        Self {
            state: Mutex::new(State::default()),
            measuring: Mutex::new(()),
            fingerprint: fingerprint.into(),
            path: None,
        }
    }

    /// Opens or creates a cache file. A torn final record is discarded.
    pub fn open(path: &Path, fingerprint: impl Into<String>) -> Result<Self> {
        let fingerprint = fingerprint.into();
        let existing = match std::fs::read(path) {
            Ok(bytes) => Some(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut state = State::default();
        let file = match existing.filter(|b| !b.is_empty()) {
            None => {
                let mut f = File::create(path)?;
                write_header(&mut f, &fingerprint)?;
                f.flush()?;
                f
            }
            Some(bytes) => {
                let parsed = parse_records(&bytes, path)?;
                match parsed.fingerprint.as_deref() {
                    Some(found) if found == fingerprint => {}
                    found => {
                        return Err(Error::FingerprintMismatch {
                            path: path.to_path_buf(),
                            expected: fingerprint,
                            found: found.unwrap_or("<none>").to_string(),
                        })
                    }
                }
                for (sig, ms) in parsed.records {
                    state.entries.entry(sig).or_insert(ms);
                }
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(parsed.valid_len as u64)?;
                let mut f = OpenOptions::new().append(true).open(path)?;
                if parsed.unterminated {
                    f.write_all(b"\n")?;
                }
                f
            }
        };
        state.file = Some(file);
        Ok(Self {
            state: Mutex::new(state),
            measuring: Mutex::new(()),
            fingerprint,
            path: Some(path.to_path_buf()),
        })
    }

    /// Reads the fingerprint header of a cache file without opening it for writing.
    pub fn read_fingerprint(path: &Path) -> Result<Option<String>> {
        Ok(parse_records(&std::fs::read(path)?, path)?.fingerprint)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Returns the cached latency for `signature`, measuring it on a miss.
    /// `model` builds the pruned model and is only called when the provider
    /// needs it.
    pub fn get_or_measure(
        &self,
        provider: &dyn LatencyProvider,
        signature: &Signature,
        protocol: &BenchmarkProtocol,
        model: impl FnOnce() -> Result<ModelGraph>,
    ) -> Result<f64> {
        if let Some(ms) = self.lock().hit(signature) {
            return Ok(ms);
        }
        let _turn = self.measuring.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(ms) = self.lock().hit(signature) {
            return Ok(ms);
        }
        let built = if provider.needs_model() { model()? } else { ModelGraph::default() };
        let ms = provider.measure(&built, signature, protocol)?;
        let mut state = self.lock();
        state.entries.insert(signature.clone(), ms);
        state.misses += 1;
        state.record(signature, false, ms);
        if let Some(f) = state.file.as_mut() {
            write_record(&mut *f, signature, ms)?;
            f.flush()?;
        }
        Ok(ms)
    }

    /// Stored value without touching the counters.
    pub fn peek(&self, signature: &Signature) -> Option<f64> {
        self.lock().entries.get(signature).copied()
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        let s = self.lock();
        CacheStats::from_counts(s.hits, s.misses)
    }

    /// Hit/miss events since the cache was opened, in query order.
    pub fn events(&self) -> Vec<CacheEvent> {
        self.lock().events.clone()
    }
}
