//! Embedded document store for flow records and imported tabular data.
//!
//! Documents are grouped into per-day partitions (UTC). Each partition is an
//! append-only JSON-lines log on disk and an in-memory inverted index
//! (field → value → postings) rebuilt by replaying the logs at open. A batch
//! becomes visible only after its id is appended to the commit log, so a
//! crash mid-batch leaves no partial batch behind.
//!
//! On-disk layout under the store directory:
//!
//! ```text
//! commits.log               one committed batch id per line
//! partitions/YYYY-MM-DD.jsonl
//! partitions/undated.jsonl  documents without a day
//! ```
//!
//! Each partition line is `{"batch": <id>, "doc": <Document>}`, or a
//! tombstone `{"batch": <id>, "delete": <doc_id>}` written when a document
//! moves to another partition. When the same `doc_id` appears more than
//! once the highest batch wins.

mod agg;
mod filter;
mod log;

pub use agg::{
    AggregationResult, AggregationSpec, Bucket, BucketSort, Having, Metric, StoreLimits, TermsAgg,
    DOC_COUNT,
};
pub use filter::{Literal, Predicate, QueryFilter};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::capture::Micros;
use crate::decode::Transport;
use crate::flow::FlowRecord;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("field `{field}` is indexed as {existing} but got {found}")]
    SchemaConflict {
        field: String,
        existing: FieldType,
        found: FieldType,
    },
    #[error("storage full")]
    StorageFull,
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("invalid value for field `{field}`: {reason}")]
    InvalidLiteral { field: String, reason: String },
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("invalid aggregation: {0}")]
    InvalidSpec(String),
    #[error("aggregation needs {required} buckets but max_buckets is {limit}; raise max_buckets")]
    TooManyBuckets { required: u64, limit: u64 },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Str(String),
    Int(i64),
    Ip(IpAddr),
    Ts(Micros),
}

impl Value {
    pub fn field_type(&self) -> FieldType {
        match self {
            Value::Str(_) => FieldType::String,
            Value::Int(_) => FieldType::Integer,
            Value::Ip(_) => FieldType::Ip,
            Value::Ts(_) => FieldType::Timestamp,
        }
    }

    /// Untagged JSON: strings and addresses as strings, integers and
    /// timestamps (µs) as numbers.
    pub fn to_plain_json(&self) -> serde_json::Value {
        match self {
            Value::Str(s) => s.clone().into(),
            Value::Int(i) | Value::Ts(i) => (*i).into(),
            Value::Ip(ip) => ip.to_string().into(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => f.write_str(s),
            Value::Int(i) | Value::Ts(i) => write!(f, "{i}"),
            Value::Ip(ip) => write!(f, "{ip}"),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<IpAddr> for Value {
    fn from(ip: IpAddr) -> Self {
        Value::Ip(ip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    String,
    Integer,
    Ip,
    Timestamp,
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldType::String => "string",
            FieldType::Integer => "integer",
            FieldType::Ip => "ip",
            FieldType::Timestamp => "timestamp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Flow,
    Csv,
    Json,
}

/// Field layout of flow documents. These fields are always known to the
/// query layer, even before any flow is indexed.
pub const FLOW_FIELDS: &[(&str, FieldType)] = &[
    ("flow_id", FieldType::String),
    ("orig_ip", FieldType::Ip),
    ("orig_port", FieldType::Integer),
    ("resp_ip", FieldType::Ip),
    ("resp_port", FieldType::Integer),
    ("proto", FieldType::String),
    ("first_ts", FieldType::Timestamp),
    ("last_ts", FieldType::Timestamp),
    ("duration", FieldType::Integer),
    ("orig_bytes", FieldType::Integer),
    ("resp_bytes", FieldType::Integer),
    ("orig_pkts", FieldType::Integer),
    ("resp_pkts", FieldType::Integer),
    ("day", FieldType::String),
    ("orig_name", FieldType::String),
    ("resp_name", FieldType::String),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_kind: SourceKind,
    /// Partition day; `None` files the document under `undated`.
    #[serde(default)]
    pub day: Option<NaiveDate>,
    pub fields: BTreeMap<String, Value>,
}

impl Document {
    pub fn get(&self, field: &str) -> Option<&Value> {
        self.fields.get(field)
    }

    pub fn from_flow(flow: &FlowRecord) -> Document {
        let mut f = BTreeMap::new();
        let int = |v: u64| Value::Int(v as i64);
        f.insert("flow_id".into(), Value::Str(flow.flow_id.clone()));
        f.insert("orig_ip".into(), Value::Ip(flow.orig_ip));
        f.insert("orig_port".into(), int(flow.orig_port as u64));
        f.insert("resp_ip".into(), Value::Ip(flow.resp_ip));
        f.insert("resp_port".into(), int(flow.resp_port as u64));
        f.insert("proto".into(), Value::Str(flow.proto.to_string()));
        f.insert("first_ts".into(), Value::Ts(flow.first_ts));
        f.insert("last_ts".into(), Value::Ts(flow.last_ts));
        f.insert("duration".into(), Value::Int(flow.duration));
        f.insert("orig_bytes".into(), int(flow.orig_bytes));
        f.insert("resp_bytes".into(), int(flow.resp_bytes));
        f.insert("orig_pkts".into(), int(flow.orig_pkts));
        f.insert("resp_pkts".into(), int(flow.resp_pkts));
        f.insert("day".into(), Value::Str(flow.day.to_string()));
        if let Some(n) = &flow.orig_name {
            f.insert("orig_name".into(), Value::Str(n.clone()));
        }
        if let Some(n) = &flow.resp_name {
            f.insert("resp_name".into(), Value::Str(n.clone()));
        }
        Document {
            doc_id: flow.flow_id.clone(),
            source_kind: SourceKind::Flow,
            day: Some(flow.day),
            fields: f,
        }
    }

    /// Inverse of [`Document::from_flow`]; `None` if this is not a well-formed flow document.
    pub fn to_flow(&self) -> Option<FlowRecord> {
        let s = |k: &str| match self.get(k) {
            Some(Value::Str(s)) => Some(s.clone()),
            _ => None,
        };
        let int = |k: &str| match self.get(k) {
            Some(Value::Int(i)) => Some(*i),
            _ => None,
        };
        let ts = |k: &str| match self.get(k) {
            Some(Value::Ts(t)) => Some(*t),
            _ => None,
        };
        let ip = |k: &str| match self.get(k) {
            Some(Value::Ip(ip)) => Some(*ip),
            _ => None,
        };
        Some(FlowRecord {
            flow_id: s("flow_id")?,
            orig_ip: ip("orig_ip")?,
            orig_port: u16::try_from(int("orig_port")?).ok()?,
            resp_ip: ip("resp_ip")?,
            resp_port: u16::try_from(int("resp_port")?).ok()?,
            proto: Transport::parse(&s("proto")?)?,
            first_ts: ts("first_ts")?,
            last_ts: ts("last_ts")?,
            duration: int("duration")?,
            orig_bytes: int("orig_bytes")? as u64,
            resp_bytes: int("resp_bytes")? as u64,
            orig_pkts: int("orig_pkts")? as u64,
            resp_pkts: int("resp_pkts")? as u64,
            day: s("day")?.parse().ok()?,
            orig_name: s("orig_name"),
            resp_name: s("resp_name"),
        })
    }

    /// JSON view with untagged field values.
    pub fn to_plain_json(&self) -> serde_json::Value {
        let fields: serde_json::Map<String, serde_json::Value> = self
            .fields
            .iter()
            .map(|(k, v)| (k.clone(), v.to_plain_json()))
            .collect();
        serde_json::json!({
            "doc_id": self.doc_id,
            "source_kind": self.source_kind,
            "day": self.day,
            "fields": fields,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Day(NaiveDate),
    Undated,
}

impl Partition {
    pub fn of(day: Option<NaiveDate>) -> Self {
        day.map_or(Partition::Undated, Partition::Day)
    }

    pub fn file_stem(&self) -> String {
        match self {
            Partition::Day(d) => d.format("%Y-%m-%d").to_string(),
            Partition::Undated => "undated".to_string(),
        }
    }

    pub fn from_file_stem(s: &str) -> Option<Self> {
        if s == "undated" {
            return Some(Partition::Undated);
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .map(Partition::Day)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldInfo {
    #[serde(rename = "type")]
    pub ty: FieldType,
    pub docs: u64,
}

/// Field name → type and number of live documents carrying it.
pub type Schema = BTreeMap<String, FieldInfo>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", content = "day")]
pub enum CleanupScope {
    All,
    ByDay(NaiveDate),
}

#[derive(Default)]
struct PartitionIndex {
    slots: Vec<Option<Arc<Document>>>,
    by_id: BTreeMap<String, u32>,
    postings: HashMap<String, HashMap<Value, Vec<u32>>>,
}

impl PartitionIndex {
    fn live(&self) -> usize {
        self.by_id.len()
    }

    /// Inserts or replaces; returns the replaced document.
    fn put(&mut self, doc: Arc<Document>) -> Option<Arc<Document>> {
        let old = self
            .by_id
            .get(&doc.doc_id)
            .and_then(|&ord| self.slots[ord as usize].take());
        let ord = self.slots.len() as u32;
        for (field, value) in &doc.fields {
            self.postings
                .entry(field.clone())
                .or_default()
                .entry(value.clone())
                .or_default()
                .push(ord);
        }
        self.by_id.insert(doc.doc_id.clone(), ord);
        self.slots.push(Some(doc));
        old
    }

    fn remove(&mut self, doc_id: &str) -> Option<Arc<Document>> {
        let ord = self.by_id.remove(doc_id)?;
        self.slots[ord as usize].take()
    }

    fn doc(&self, ord: u32) -> Option<&Arc<Document>> {
        self.slots[ord as usize].as_ref()
    }
}

#[derive(Default)]
struct StoreState {
    partitions: BTreeMap<Partition, PartitionIndex>,
    /// Observed types and live document counts.
    observed: BTreeMap<String, FieldInfo>,
    locations: HashMap<String, Partition>,
}

impl StoreState {
    fn field_type(&self, field: &str) -> Option<FieldType> {
        self.observed
            .get(field)
            .map(|i| i.ty)
            .or_else(|| FLOW_FIELDS.iter().find(|(n, _)| *n == field).map(|(_, t)| *t))
    }

    fn count_fields(&mut self, doc: &Document, add: bool) {
        for (k, v) in &doc.fields {
            let info = self.observed.entry(k.clone()).or_insert(FieldInfo {
                ty: v.field_type(),
                docs: 0,
            });
            if add {
                info.docs += 1;
            } else {
                info.docs = info.docs.saturating_sub(1);
            }
        }
        if !add {
            self.observed.retain(|_, i| i.docs > 0);
        }
    }

    fn apply_put(&mut self, doc: Document) {
        let part = Partition::of(doc.day);
        if let Some(prev) = self.locations.get(&doc.doc_id).copied() {
            let old = if prev == part {
                None
            } else {
                self.partitions.get_mut(&prev).and_then(|p| p.remove(&doc.doc_id))
            };
            if let Some(old) = old {
                self.count_fields(&old, false);
            }
        }
        self.count_fields(&doc, true);
        self.locations.insert(doc.doc_id.clone(), part);
        let replaced = self.partitions.entry(part).or_default().put(Arc::new(doc));
        if let Some(old) = replaced {
            self.count_fields(&old, false);
        }
    }

    fn apply_delete(&mut self, doc_id: &str, part: Partition) {
        if self.locations.get(doc_id) != Some(&part) {
            return;
        }
        self.locations.remove(doc_id);
        if let Some(old) = self.partitions.get_mut(&part).and_then(|p| p.remove(doc_id)) {
            self.count_fields(&old, false);
        }
    }

    fn drop_partition(&mut self, part: Partition) -> u64 {
        let Some(index) = self.partitions.remove(&part) else {
            return 0;
        };
        let mut removed = 0;
        for doc in index.slots.iter().flatten() {
            self.locations.remove(&doc.doc_id);
            self.count_fields(doc, false);
            removed += 1;
        }
        removed
    }
}

/// One store per case directory. Readers run concurrently; batches and
/// cleanups are serialized by a writer lock and swap in atomically.
pub struct Store {
    dir: PathBuf,
    state: RwLock<StoreState>,
    writer: Mutex<log::Log>,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Store> {
        let (log, ops) = log::Log::open(dir)?;
        let mut state = StoreState::default();
        for op in ops {
            match op {
                log::Op::Put(doc) => state.apply_put(doc),
                log::Op::Delete(id, part) => state.apply_delete(&id, part),
            }
        }
        Ok(Store {
            dir: dir.to_path_buf(),
            state: RwLock::new(state),
            writer: Mutex::new(log),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, StoreState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, StoreState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Durably indexes `docs` as one batch and makes them visible together.
    pub fn index_batch(&self, docs: Vec<Document>) -> Result<u64> {
        if docs.is_empty() {
            return Ok(0);
        }
        let mut log = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        {
            let state = self.read();
            let mut batch_types: HashMap<&str, FieldType> = HashMap::new();
            for doc in &docs {
                if doc.doc_id.is_empty() {
                    return Err(StoreError::InvalidDocument("empty doc_id".into()));
                }
                for (name, value) in &doc.fields {
                    if name.is_empty() {
                        return Err(StoreError::InvalidDocument(format!(
                            "document {} has an empty field name",
                            doc.doc_id
                        )));
                    }
                    let found = value.field_type();
                    let existing = batch_types
                        .get(name.as_str())
                        .copied()
                        .or_else(|| state.field_type(name));
                    if let Some(existing) = existing {
                        if existing != found {
                            return Err(StoreError::SchemaConflict {
                                field: name.clone(),
                                existing,
                                found,
                            });
                        }
                    }
                    batch_types.insert(name, found);
                }
            }
        }
        let moved: Vec<(&str, Partition)> = {
            let state = self.read();
            let mut seen = HashSet::new();
            docs.iter()
                .filter_map(|d| {
                    let prev = *state.locations.get(&d.doc_id)?;
                    (prev != Partition::of(d.day) && seen.insert((d.doc_id.as_str(), prev)))
                        .then_some((d.doc_id.as_str(), prev))
                })
                .collect()
        };
        log.append_batch(&docs, &moved)?;
        let n = docs.len() as u64;
        let mut state = self.write();
        for doc in docs {
            state.apply_put(doc);
        }
        Ok(n)
    }

    /// Documents matching `filter`, ordered by (day, doc_id).
    pub fn query(&self, filter: &QueryFilter, limit: usize, offset: usize) -> Result<Vec<Document>> {
        let state = self.read();
        let resolved = filter.resolve(|f| state.field_type(f))?;
        let mut out = Vec::new();
        let mut skipped = 0;
        for index in state.partitions.values() {
            for doc in filter::matching(index, &resolved) {
                if skipped < offset {
                    skipped += 1;
                    continue;
                }
                if out.len() >= limit {
                    return Ok(out);
                }
                out.push(doc.as_ref().clone());
            }
        }
        Ok(out)
    }

    pub fn count(&self, filter: &QueryFilter) -> Result<u64> {
        let state = self.read();
        let resolved = filter.resolve(|f| state.field_type(f))?;
        Ok(state
            .partitions
            .values()
            .map(|p| filter::matching(p, &resolved).count() as u64)
            .sum())
    }

    pub fn aggregate(
        &self,
        filter: &QueryFilter,
        spec: &AggregationSpec,
        limits: &StoreLimits,
    ) -> Result<AggregationResult> {
        let state = self.read();
        let lookup = |f: &str| state.field_type(f);
        spec.validate(&lookup)?;
        limits.validate()?;
        let resolved = filter.resolve(lookup)?;
        let docs: Vec<&Document> = state
            .partitions
            .values()
            .flat_map(|p| filter::matching(p, &resolved))
            .map(|d| d.as_ref())
            .collect();
        agg::evaluate(spec, &docs, limits)
    }

    /// Fields carried by at least one live document.
    pub fn list_fields(&self) -> Schema {
        self.read().observed.clone()
    }

    pub fn doc_count(&self) -> u64 {
        self.read().locations.len() as u64
    }

    /// Live documents per partition.
    pub fn partition_counts(&self) -> BTreeMap<Partition, u64> {
        self.read()
            .partitions
            .iter()
            .filter(|(_, p)| p.live() > 0)
            .map(|(k, p)| (*k, p.live() as u64))
            .collect()
    }

    /// Visits every live document of the given partitions (all if `None`).
    pub fn for_each_doc(&self, day: Option<Partition>, mut f: impl FnMut(&Document)) {
        let state = self.read();
        for (part, index) in &state.partitions {
            if day.is_some_and(|d| d != *part) {
                continue;
            }
            for &ord in index.by_id.values() {
                if let Some(doc) = index.doc(ord) {
                    f(doc);
                }
            }
        }
    }

    pub fn cleanup(&self, scope: CleanupScope) -> Result<u64> {
        let mut log = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let targets: Vec<Partition> = match scope {
            CleanupScope::All => log.partitions()?,
            CleanupScope::ByDay(d) => vec![Partition::Day(d)],
        };
        for p in &targets {
            log.remove_partition(*p)?;
        }
        let mut state = self.write();
        let mut removed = 0;
        let parts: Vec<Partition> = match scope {
            CleanupScope::All => state.partitions.keys().copied().collect(),
            CleanupScope::ByDay(d) => vec![Partition::Day(d)],
        };
        for p in parts {
            removed += state.drop_partition(p);
        }
        Ok(removed)
    }

    /// Distinct values of `field` among documents of one partition.
    pub fn distinct_values(&self, part: Partition, field: &str) -> HashSet<Value> {
        let state = self.read();
        state
            .partitions
            .get(&part)
            .and_then(|p| p.postings.get(field).map(|m| (p, m)))
            .map(|(p, m)| {
                m.iter()
                    .filter(|(_, ords)| ords.iter().any(|&o| p.doc(o).is_some()))
                    .map(|(v, _)| v.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests;
