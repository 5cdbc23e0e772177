use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BenchmarkProtocol, LatencyProvider};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Signature};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    signature: Signature,
    ms: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fingerprint: String,
}

/// Contents of a line-delimited signature/latency file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordFile {
    /// From an optional `{"fingerprint": ...}` first line.
    pub fingerprint: Option<String>,
    pub records: Vec<(Signature, f64)>,
    /// Bytes up to the end of the last complete record.
    pub valid_len: usize,
    /// The valid prefix does not end in a newline.
    pub unterminated: bool,
}

/// Parses records, one JSON object per line. An unparseable final line
/// without a trailing newline is treated as a torn write and ignored.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<RecordFile> {
    let mut out = RecordFile::default();
    let mut offset = 0usize;
    let mut seen_content = false;
    for (lineno, raw) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        let start = offset;
        offset += raw.len();
        let terminated = raw.last() == Some(&b'\n');
        let text = match std::str::from_utf8(raw) {
            Ok(t) => t.trim(),
            Err(_) if !terminated => {
                out.valid_len = start;
                break;
            }
            Err(_) => return Err(record_error(path, lineno, "not UTF-8".into())),
        };
        if text.is_empty() {
            out.valid_len = offset;
            continue;
        }
        let parsed = match serde_json::from_str::<Record>(text) {
            Ok(r) => Ok(Some(r)),
            Err(e) if !seen_content => match serde_json::from_str::<Header>(text) {
                Ok(h) => {
                    out.fingerprint = Some(h.fingerprint);
                    Ok(None)
                }
                Err(_) => Err(e.to_string()),
            },
            Err(e) => Err(e.to_string()),
        };
        seen_content = true;
        match parsed {
            Ok(Some(record)) => {
                if !(record.ms.is_finite() && record.ms > 0.0) {
                    return Err(record_error(path, lineno, format!("latency must be positive, got {}", record.ms)));
                }
                if record.signature.is_empty() {
                    return Err(record_error(path, lineno, "empty signature".into()));
                }
                out.records.push((record.signature, record.ms));
            }
            Ok(None) => {}
            Err(_) if !terminated => {
                out.valid_len = start;
                break;
            }
            Err(reason) => return Err(record_error(path, lineno, reason)),
        }
        out.valid_len = offset;
        out.unterminated = !terminated;
    }
    Ok(out)
}

fn record_error(path: &Path, lineno: usize, reason: String) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line: lineno + 1,
        reason,
    }
}

pub fn write_record(mut w: impl Write, signature: &Signature, ms: f64) -> std::io::Result<()> {
    let line = serde_json::to_string(&Record {
        signature: signature.clone(),
        ms,
    })?;
    writeln!(w, "{line}")
}

pub(crate) fn write_header(mut w: impl Write, fingerprint: &str) -> std::io::Result<()> {
    let line = serde_json::to_string(&Header {
        fingerprint: fingerprint.to_string(),
    })?;
    writeln!(w, "{line}")
}

/// Whole-model latencies keyed by signature.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayTable {
    entries: HashMap<Signature, f64>,
    order: Vec<Signature>,
}

impl ReplayTable {
    /// The first record for a signature wins.
    pub fn from_records(records: impl IntoIterator<Item = (Signature, f64)>) -> Self {
        let mut table = Self::default();
        for (sig, ms) in records {
            table.insert(sig, ms);
        }
        table
    }

    /// Returns false (and keeps the old value) if `signature` is present.
    pub fn insert(&mut self, signature: Signature, ms: f64) -> bool {
        if self.entries.contains_key(&signature) {
            return false;
        }
        self.entries.insert(signature.clone(), ms);
        self.order.push(signature);
        true
    }

    pub fn get(&self, signature: &Signature) -> Option<f64> {
        self.entries.get(signature).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&Signature, f64)> {
        self.order.iter().map(|s| (s, self.entries[s]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_records(parse_records(&bytes, path)?.records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (sig, ms) in self.iter() {
            write_record(&mut buf, sig, ms)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Answers only from recorded measurements; unknown signatures are errors.
#[derive(Clone, Debug)]
pub struct ReplayProvider {
    table: ReplayTable,
    source: Option<PathBuf>,
    digest: String,
}

impl ReplayProvider {
    pub fn new(table: ReplayTable) -> Self {
        let mut hasher = Sha256::new();
        for (sig, ms) in table.iter() {
            hasher.update(format!("{sig}={ms:e};"));
        }
        Self {
            table,
            source: None,
            digest: hex::encode(hasher.finalize()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut provider = Self::new(ReplayTable::load(path)?);
        provider.source = Some(path.to_path_buf());
        Ok(provider)
    }

    pub fn table(&self) -> &ReplayTable {
        &self.table
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }
}

impl LatencyProvider for ReplayProvider {
    fn measure(&self, _model: &ModelGraph, signature: &Signature, _protocol: &BenchmarkProtocol) -> Result<f64> {
        self.table
            .get(signature)
            .ok_or_else(|| Error::UnmeasuredSignature(signature.clone()))
    }

    fn fingerprint(&self) -> String {
        format!("replay:{}", self.digest)
    }

    fn needs_model(&self) -> bool {
        false
    }
}
