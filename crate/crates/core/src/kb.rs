//! Multi-collection vector knowledge base with exact search.
//!
//! ## On-disk layout
//!
//! ```text
//! <store>/
//!   manifest.json            {"format_version":1,"dim":384,"collections":[...]}
//!   LOCK                     advisory lock file (exclusive for writers)
//!   <collection>.log.jsonl   one {entry_id, summary, meta} object per row
//!   <collection>.vec         row-major little-endian f32, `dim` values per row
//! ```
//!
//! Row `i` of a collection's log pairs with row `i` of its vector file.
//! Upserts append; a repeated `entry_id` supersedes earlier rows on replay.
//! Closing a writable store compacts both files down to the live rows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{unit_similarity, Embedding};
use crate::ingest::{Proto, Severity, Timestamp, TrafficRecord};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("dimension mismatch: store has {expected}, entry `{entry_id}` has {actual}")]
    DimensionMismatch { expected: usize, actual: usize, entry_id: String },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("unknown collection `{0}`")]
    UnknownCollection(String),
    #[error("store at {0} is locked by another process")]
    Locked(PathBuf),
    #[error("store is read-only")]
    ReadOnly,
    #[error("top_n must be at least 1")]
    InvalidTopN,
}

impl From<std::io::Error> for KbError {
    fn from(e: std::io::Error) -> Self {
        KbError::StorageFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectionId {
    Anomaly,
    Heuristic,
    Telemetry,
}

impl CollectionId {
    /// All collections, in name order.
    pub const ALL: [CollectionId; 3] = [CollectionId::Anomaly, CollectionId::Heuristic, CollectionId::Telemetry];

    pub fn as_str(self) -> &'static str {
        match self {
            CollectionId::Anomaly => "anomaly",
            CollectionId::Heuristic => "heuristic",
            CollectionId::Telemetry => "telemetry",
        }
    }
}

impl fmt::Display for CollectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollectionId {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| KbError::UnknownCollection(s.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<Proto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<Timestamp>,
    /// Taxonomy label, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic_code: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
}

impl Metadata {
    pub fn from_record(r: &TrafficRecord) -> Self {
        Self {
            record_id: r.record_id.clone(),
            src_ip: Some(r.src_ip),
            dst_ip: Some(r.dst_ip),
            src_port: r.src_port,
            dst_port: r.dst_port,
            proto: Some(r.proto.clone()),
            ts: Some(r.ts),
            label: r.label.as_ref().and_then(|l| l.taxonomy.clone()),
            heuristic_code: r.label.as_ref().and_then(|l| l.heuristic_code),
            severity: r.label.as_ref().map(|l| l.severity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBEntry {
    pub entry_id: String,
    pub summary: String,
    pub vector: Embedding,
    pub meta: Metadata,
}

/// Conjunction of equality tests and an optional inclusive time range.
///
/// `endpoint_ips` / `endpoint_ports` each contribute one clause per value
/// that matches either end of the flow. `protos` is satisfied by any listed
/// protocol. Collections in `tuple_exempt` skip every 5-tuple and time
/// clause, and only have to satisfy `protos` when they carry a protocol.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataFilter {
    pub src_ip: Option<IpAddr>,
    pub dst_ip: Option<IpAddr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub endpoint_ips: Vec<IpAddr>,
    pub endpoint_ports: Vec<u16>,
    pub protos: Vec<Proto>,
    pub label: Option<String>,
    pub heuristic_code: Option<u32>,
    pub severity: Option<Severity>,
    pub ts_min: Option<Timestamp>,
    pub ts_max: Option<Timestamp>,
    pub tuple_exempt: Vec<CollectionId>,
}

impl MetadataFilter {
    pub fn match_all() -> Self {
        Self::default()
    }

    pub fn matches(&self, collection: CollectionId, m: &Metadata) -> bool {
        fn eq<T: PartialEq>(want: &Option<T>, have: &Option<T>) -> bool {
            want.as_ref().is_none_or(|w| have.as_ref() == Some(w))
        }
        let exempt = self.tuple_exempt.contains(&collection);
        if !exempt {
            let tuple_ok = eq(&self.src_ip, &m.src_ip)
                && eq(&self.dst_ip, &m.dst_ip)
                && eq(&self.src_port, &m.src_port)
                && eq(&self.dst_port, &m.dst_port)
                && self
                    .endpoint_ips
                    .iter()
                    .all(|ip| m.src_ip.as_ref() == Some(ip) || m.dst_ip.as_ref() == Some(ip))
                && self
                    .endpoint_ports
                    .iter()
                    .all(|p| m.src_port == Some(*p) || m.dst_port == Some(*p));
            if !tuple_ok {
                return false;
            }
            if self.ts_min.is_some() || self.ts_max.is_some() {
                let Some(ts) = m.ts else { return false };
                if self.ts_min.is_some_and(|lo| ts < lo) || self.ts_max.is_some_and(|hi| ts > hi) {
                    return false;
                }
            }
        }
        let proto_ok = self.protos.is_empty()
            || match &m.proto {
                Some(p) => self.protos.contains(p),
                None => exempt,
            };
        proto_ok
            && eq(&self.label, &m.label)
            && eq(&self.heuristic_code, &m.heuristic_code)
            && eq(&self.severity, &m.severity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub collection: CollectionId,
    pub entry: KBEntry,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UpsertCount {
    pub inserted: usize,
    pub updated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub dim: usize,
    pub collections: BTreeMap<CollectionId, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dim: usize,
    collections: Vec<CollectionId>,
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    entry_id: String,
    summary: String,
    meta: Metadata,
}

#[derive(Default)]
struct Collection {
    ids: Vec<String>,
    summaries: Vec<String>,
    metas: Vec<Metadata>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
    disk_rows: usize,
}

impl Collection {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn row<'a>(&'a self, dim: usize, i: usize) -> &'a [f32] {
        &self.vectors[i * dim..(i + 1) * dim]
    }

    fn entry(&self, dim: usize, i: usize) -> KBEntry {
        KBEntry {
            entry_id: self.ids[i].clone(),
            summary: self.summaries[i].clone(),
            vector: Embedding::from_unit(self.row(dim, i).to_vec()),
            meta: self.metas[i].clone(),
        }
    }

    fn put(&mut self, dim: usize, e: &KBEntry) -> bool {
        match self.index.get(&e.entry_id) {
            Some(&i) => {
                self.summaries[i] = e.summary.clone();
                self.metas[i] = e.meta.clone();
                self.vectors[i * dim..(i + 1) * dim].copy_from_slice(e.vector.as_slice());
                false
            }
            None => {
                self.index.insert(e.entry_id.clone(), self.ids.len());
                self.ids.push(e.entry_id.clone());
                self.summaries.push(e.summary.clone());
                self.metas.push(e.meta.clone());
                self.vectors.extend_from_slice(e.vector.as_slice());
                true
            }
        }
    }
}

/// A store directory opened either for writing (exclusive) or reading (shared).
pub struct Store {
    dir: PathBuf,
    dim: usize,
    writable: bool,
    inner: RwLock<BTreeMap<CollectionId, Collection>>,
    _lock: File,
}

fn log_path(dir: &Path, c: CollectionId) -> PathBuf {
    dir.join(format!("{c}.log.jsonl"))
}

fn vec_path(dir: &Path, c: CollectionId) -> PathBuf {
    dir.join(format!("{c}.vec"))
}

impl Store {
    /// Opens (creating when absent) a store for writing.
    pub fn open(dir: impl AsRef<Path>, dim: usize) -> Result<Self, KbError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            let m = Manifest { format_version: FORMAT_VERSION, dim, collections: CollectionId::ALL.to_vec() };
            fs::write(&manifest_path, serde_json::to_vec_pretty(&m).map_err(io_json)?)?;
        }
        Self::open_inner(dir, Some(dim), true)
    }

    /// Opens an existing store for reading; the dimension comes from its manifest.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self, KbError> {
        Self::open_inner(dir.as_ref().to_path_buf(), None, false)
    }

    fn open_inner(dir: PathBuf, want_dim: Option<usize>, writable: bool) -> Result<Self, KbError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| KbError::StorageFailure(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(KbError::StorageFailure(format!(
                "unsupported store format version {}",
                manifest.format_version
            )));
        }
        if let Some(d) = want_dim {
            if d != manifest.dim {
                return Err(KbError::DimensionMismatch {
                    expected: manifest.dim,
                    actual: d,
                    entry_id: "<open>".into(),
                });
            }
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(dir.join("LOCK"))?;
        let locked = if writable { lock.try_lock() } else { lock.try_lock_shared() };
        if locked.is_err() {
            return Err(KbError::Locked(dir));
        }
        let dim = manifest.dim;
        let mut collections = BTreeMap::new();
        for c in CollectionId::ALL {
            collections.insert(c, load_collection(&dir, c, dim)?);
        }
        Ok(Self { dir, dim, writable, inner: RwLock::new(collections), _lock: lock })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes the batch durably, then makes it visible to searches at once.
    pub fn upsert(&self, collection: CollectionId, entries: &[KBEntry]) -> Result<UpsertCount, KbError> {
        if !self.writable {
            return Err(KbError::ReadOnly);
        }
        for e in entries {
            if e.vector.dim() != self.dim {
                return Err(KbError::DimensionMismatch {
                    expected: self.dim,
                    actual: e.vector.dim(),
                    entry_id: e.entry_id.clone(),
                });
            }
        }
        if entries.is_empty() {
            return Ok(UpsertCount::default());
        }
        let mut guard = self.inner.write();
        let coll = guard.get_mut(&collection).expect("all collections loaded");

        append_rows(&self.dir, collection, entries)?;
        coll.disk_rows += entries.len();

        let mut count = UpsertCount::default();
        for e in entries {
            if coll.put(self.dim, e) {
                count.inserted += 1;
            } else {
                count.updated += 1;
            }
        }
        Ok(count)
    }

    pub fn get(&self, collection: CollectionId, entry_id: &str) -> Option<KBEntry> {
        let guard = self.inner.read();
        let coll = &guard[&collection];
        coll.index.get(entry_id).map(|&i| coll.entry(self.dim, i))
    }

    /// Looks an id up across collections in name order.
    pub fn find(&self, entry_id: &str) -> Option<(CollectionId, KBEntry)> {
        CollectionId::ALL
            .into_iter()
            .find_map(|c| self.get(c, entry_id).map(|e| (c, e)))
    }

    /// Exact scan of the named collections, highest similarity first; ties
    /// fall back to collection name then entry id.
    pub fn search(
        &self,
        collections: &[CollectionId],
        query: &Embedding,
        filter: &MetadataFilter,
        top_n: usize,
    ) -> Result<Vec<SearchHit>, KbError> {
        if top_n == 0 {
            return Err(KbError::InvalidTopN);
        }
        if query.dim() != self.dim {
            return Err(KbError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
                entry_id: "<query>".into(),
            });
        }
        let guard = self.inner.read();
        let mut scored: Vec<(f64, CollectionId, usize)> = Vec::new();
        for &c in CollectionId::ALL.iter().filter(|c| collections.contains(c)) {
            let coll = &guard[&c];
            for i in 0..coll.len() {
                if filter.matches(c, &coll.metas[i]) {
                    scored.push((unit_similarity(query.as_slice(), coll.row(self.dim, i)), c, i));
                }
            }
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then_with(|| guard[&a.1].ids[a.2].cmp(&guard[&b.1].ids[b.2]))
        });
        scored.truncate(top_n);
        Ok(scored
            .into_iter()
            .map(|(similarity, c, i)| SearchHit { collection: c, entry: guard[&c].entry(self.dim, i), similarity })
            .collect())
    }

    pub fn stats(&self) -> StoreStats {
        let guard = self.inner.read();
        StoreStats {
            dim: self.dim,
            collections: guard.iter().map(|(c, coll)| (*c, coll.len())).collect(),
        }
    }

    /// Every live entry of a collection, in insertion order.
    pub fn entries(&self, collection: CollectionId) -> Vec<KBEntry> {
        let guard = self.inner.read();
        let coll = &guard[&collection];
        (0..coll.len()).map(|i| coll.entry(self.dim, i)).collect()
    }

    /// Rewrites each collection's files to hold only live rows.
    pub fn compact(&self) -> Result<(), KbError> {
        if !self.writable {
            return Err(KbError::ReadOnly);
        }
        let mut guard = self.inner.write();
        for (&c, coll) in guard.iter_mut() {
            if coll.disk_rows == coll.len() && log_path(&self.dir, c).exists() {
                continue;
            }
            let rows: Vec<KBEntry> = (0..coll.len()).map(|i| coll.entry(self.dim, i)).collect();
            let tmp_log = self.dir.join(format!("{c}.log.jsonl.tmp"));
            let tmp_vec = self.dir.join(format!("{c}.vec.tmp"));
            write_rows(&tmp_log, &tmp_vec, &rows, false)?;
            fs::rename(&tmp_vec, vec_path(&self.dir, c))?;
            fs::rename(&tmp_log, log_path(&self.dir, c))?;
            coll.disk_rows = coll.len();
        }
        Ok(())
    }

    pub fn close(self) -> Result<(), KbError> {
        if self.writable {
            self.compact()?;
        }
        Ok(())
    }
}

fn io_json(e: serde_json::Error) -> KbError {
    KbError::StorageFailure(e.to_string())
}

fn write_rows(log: &Path, vec: &Path, entries: &[KBEntry], append: bool) -> Result<(), KbError> {
    let open = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(p)
    };
    // vectors first: on replay, a log row without its vector is dropped
    let vf = open(vec)?;
    let mut w = BufWriter::new(&vf);
    for e in entries {
        for v in e.vector.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    vf.sync_data()?;

    let lf = open(log)?;
    let mut w = BufWriter::new(&lf);
    for e in entries {
        let row = LogRow { entry_id: e.entry_id.clone(), summary: e.summary.clone(), meta: e.meta.clone() };
        serde_json::to_writer(&mut w, &row).map_err(io_json)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    lf.sync_data()?;
    Ok(())
}

fn append_rows(dir: &Path, c: CollectionId, entries: &[KBEntry]) -> Result<(), KbError> {
    write_rows(&log_path(dir, c), &vec_path(dir, c), entries, true)
}

fn load_collection(dir: &Path, c: CollectionId, dim: usize) -> Result<Collection, KbError> {
    let mut coll = Collection::default();
    let lp = log_path(dir, c);
    let vp = vec_path(dir, c);
    if !lp.exists() || !vp.exists() {
        return Ok(coll);
    }
    let mut raw = Vec::new();
    File::open(&vp)?.read_to_end(&mut raw)?;
    let row_bytes = dim * 4;
    let vec_rows = raw.len() / row_bytes;
    for (i, line) in BufReader::new(File::open(&lp)?).lines().enumerate() {
        if i >= vec_rows {
            break;
        }
        let line = line?;
        let Ok(row) = serde_json::from_str::<LogRow>(&line) else {
            // torn trailing write
            break;
        };
        let values: Vec<f32> = raw[i * row_bytes..(i + 1) * row_bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let entry = KBEntry {
            entry_id: row.entry_id,
            summary: row.summary,
            vector: Embedding::from_unit(values),
            meta: row.meta,
        };
        coll.put(dim, &entry);
        coll.disk_rows += 1;
    }
    Ok(coll)
}
