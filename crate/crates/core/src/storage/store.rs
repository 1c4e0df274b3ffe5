//! Versioned in-memory key-value store held by one replica, plus dataset
//! ingestion.
//!
//! Dataset formats, detected from the first non-blank byte:
//!
//! * JSON lines: one `{"id": <u64 or 16-hex-digit string>, "vector": [f64; 128]}`
//!   object per line.
//! * Binary: back-to-back 1032-byte records, each an 8-byte id followed by
//!   128 little-endian `f64` (1024 bytes).
//!
//! Either way a record is stored under the lowercase hex of the 8 id bytes
//! (big-endian for numeric ids) with the 1024 vector bytes as its value.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StorageError;

pub const MAX_KEY: usize = 256;
pub const MAX_VALUE: usize = 64 * 1024;
pub const VECTOR_DIM: usize = 128;
pub const RECORD_BYTES: usize = 8 + VECTOR_DIM * 8;
/// Keys with this prefix are internal and excluded from usage accounting.
pub const RESERVED_PREFIX: &str = "__";
pub const PROBE_KEY: &str = "__probe__";
pub const PROBE_BYTES: usize = 1024;
pub const INGEST_WRITER: &str = "source";

/// Totally ordered by `(counter, writer)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Version {
    pub counter: u64,
    pub writer: String,
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        self.counter.cmp(&other.counter).then_with(|| self.writer.cmp(&other.writer))
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    #[serde(with = "hex")]
    pub value: Vec<u8>,
    pub version: Version,
}

pub fn check_kv(key: &str, value: &[u8]) -> Result<(), StorageError> {
    if key.is_empty() || key.len() > MAX_KEY {
        return Err(StorageError::Validation(format!("key must be 1..={MAX_KEY} bytes")));
    }
    if value.len() > MAX_VALUE {
        return Err(StorageError::Validation(format!("value exceeds {MAX_VALUE} bytes")));
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct Store {
    records: BTreeMap<String, Record>,
    lamport: u64,
    log: Option<File>,
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    /// Replays an append-only log (one JSON record per line) and keeps
    /// appending to it.
    pub fn persistent(path: &Path) -> Result<Self, StorageError> {
        let mut s = Store::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| StorageError::Io(e.to_string()))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| StorageError::Io(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line).map_err(|e| StorageError::Io(format!("corrupt log: {e}")))?;
                s.apply(rec);
            }
        }
        s.log = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| StorageError::Io(e.to_string()))?,
        );
        Ok(s)
    }

    pub fn get(&self, key: &str) -> Option<&Record> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.keys().filter(|k| !k.starts_with(RESERVED_PREFIX)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Version for a new local write: one past everything seen so far.
    pub fn next_version(&mut self, writer: &str) -> Version {
        self.lamport += 1;
        Version {
            counter: self.lamport,
            writer: writer.to_string(),
        }
    }

    /// Keeps the record if it is newer than what is held. Returns whether it
    /// was applied.
    pub fn apply(&mut self, rec: Record) -> bool {
        self.lamport = self.lamport.max(rec.version.counter);
        if let Some(cur) = self.records.get(&rec.key) {
            if cur.version >= rec.version {
                return false;
            }
        }
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            // a failed append only loses durability, never the in-memory write
            let _ = writeln!(log, "{line}");
        }
        self.records.insert(rec.key.clone(), rec);
        true
    }

    pub fn merge(&mut self, recs: impl IntoIterator<Item = Record>) -> usize {
        recs.into_iter().filter(|r| self.apply(r.clone())).count()
    }

    pub fn snapshot(&self) -> Vec<Record> {
        self.records.values().cloned().collect()
    }

    /// Key plus value bytes of every non-reserved record.
    pub fn used_bytes(&self) -> usize {
        self.records
            .values()
            .filter(|r| !r.key.starts_with(RESERVED_PREFIX))
            .map(|r| r.key.len() + r.value.len())
            .sum()
    }

    pub fn used_mb(&self) -> f64 {
        self.used_bytes() as f64 / (1024.0 * 1024.0)
    }

    /// Nearest stored vector by Euclidean distance, if within `threshold`.
    pub fn vector_match(&self, query: &[f64], threshold: f64) -> Result<Option<(String, f64)>, StorageError> {
        if query.len() != VECTOR_DIM {
            return Err(StorageError::Validation(format!(
                "query has {} dimensions, expected {VECTOR_DIM}",
                query.len()
            )));
        }
        let mut best: Option<(String, f64)> = None;
        for rec in self.records.values() {
            let Some(v) = decode_vector(&rec.value) else { continue };
            let d = query.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                best = Some((rec.key.clone(), d));
            }
        }
        Ok(best.filter(|(_, d)| *d <= threshold))
    }
}

pub fn encode_vector(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_vector(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() != VECTOR_DIM * 8 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

pub fn id_key(id: [u8; 8]) -> String {
    hex::encode(id)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonId {
    Num(u64),
    Text(String),
}

#[derive(Deserialize)]
struct JsonRecord {
    id: JsonId,
    vector: Vec<f64>,
}

/// Accepts `file://` URIs or plain paths.
pub fn source_path(uri: &str) -> PathBuf {
    PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri))
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    match first {
        None => Ok(Vec::new()),
        Some(b'{') => parse_json_lines(bytes),
        Some(_) => parse_binary(bytes),
    }
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(StorageError::Dataset(format!(
            "binary dataset length {} is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|c| (id_key(c[..8].try_into().expect("8-byte id")), c[8..].to_vec()))
        .collect())
}

fn parse_json_lines(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
    let text = std::str::from_utf8(bytes).map_err(|e| StorageError::Dataset(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: JsonRecord =
            serde_json::from_str(line).map_err(|e| StorageError::Dataset(format!("line {}: {e}", i + 1)))?;
        if r.vector.len() != VECTOR_DIM {
            return Err(StorageError::Dataset(format!("line {}: vector must have {VECTOR_DIM} values", i + 1)));
        }
        let key = match r.id {
            JsonId::Num(n) => id_key(n.to_be_bytes()),
            JsonId::Text(s) => {
                let raw = hex::decode(&s).map_err(|e| StorageError::Dataset(format!("line {}: {e}", i + 1)))?;
                let id: [u8; 8] = raw
                    .try_into()
                    .map_err(|_| StorageError::Dataset(format!("line {}: id must be 8 bytes", i + 1)))?;
                id_key(id)
            }
        };
        out.push((key, encode_vector(&r.vector)));
    }
    Ok(out)
}

pub fn load_dataset(uri: &str) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
    let path = source_path(uri);
    let bytes = std::fs::read(&path).map_err(|e| StorageError::Dataset(format!("{}: {e}", path.display())))?;
    parse_dataset(&bytes)
}

/// Records every replica creates identically from the same dataset.
pub fn initial_records(dataset: Vec<(String, Vec<u8>)>) -> Vec<Record> {
    let v = Version {
        counter: 0,
        writer: INGEST_WRITER.into(),
    };
    std::iter::once(Record {
        key: PROBE_KEY.into(),
        value: vec![0u8; PROBE_BYTES],
        version: v.clone(),
    })
    .chain(dataset.into_iter().map(|(key, value)| Record {
        key,
        value,
        version: v.clone(),
    }))
    .collect()
}
