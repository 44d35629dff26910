//! Operations shared by the HTTP routes and the CLI, so both serialize the
//! same values.

use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use netcase_core::case::{Case, CaseError, ConfigRef, Engine};
use netcase_core::detect::{interval_histogram, port_scan_report, DetectionReport, DetectionThresholds, IntervalHistogram};
use netcase_core::ingest::{ImportConfig, WatchConfig};
use netcase_core::store::{AggregationSpec, Document, QueryFilter, StoreLimits};
use serde::{Deserialize, Serialize};

fn default_config() -> ConfigRef {
    ConfigRef::Inline(ImportConfig::new("default"))
}

fn default_limit() -> usize {
    100
}

fn limits(max_buckets: Option<u64>) -> StoreLimits {
    max_buckets.map_or_else(StoreLimits::default, StoreLimits::with_max_buckets)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub case_id: String,
}

/// Inputs are relative to the case's data directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportRequest {
    pub inputs: Vec<String>,
    /// A saved config id or a full config; defaults to `default` settings.
    #[serde(default = "default_config")]
    pub config: ConfigRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    #[serde(default)]
    pub filter: QueryFilter,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default)]
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    pub total: u64,
    pub hits: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRequest {
    #[serde(default)]
    pub filter: QueryFilter,
    pub aggregation: AggregationSpec,
    #[serde(default)]
    pub max_buckets: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortScanParams {
    pub day: NaiveDate,
    pub pair_min: Option<u64>,
    pub total_min: Option<u64>,
    pub max_buckets: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramParams {
    pub day: NaiveDate,
    pub pair_floor: Option<u64>,
    pub max_buckets: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackupRequest {
    /// Destination on the server; defaults to `<data-root>/backups/`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackupResponse {
    pub case_id: String,
    pub path: PathBuf,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreRequest {
    pub archive: PathBuf,
    pub case_id: String,
}

/// A watch registration; the id comes from the route.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatchRequest {
    pub directory: PathBuf,
    pub config_id: String,
    #[serde(default)]
    pub poll_interval: Option<u64>,
    #[serde(default)]
    pub enabled: Option<bool>,
}

impl WatchRequest {
    pub fn into_config(self, watch_id: &str) -> WatchConfig {
        let mut w = WatchConfig::new(watch_id, self.directory, &self.config_id);
        if let Some(p) = self.poll_interval {
            w.poll_interval = p;
        }
        if let Some(e) = self.enabled {
            w.enabled = e;
        }
        w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatchResponse {
    pub watch_id: String,
    pub changed: bool,
}

pub fn thresholds(p: &PortScanParams) -> DetectionThresholds {
    let mut t = DetectionThresholds::default();
    if let Some(v) = p.pair_min {
        t.pair_min_unique_ports = v;
    }
    if let Some(v) = p.total_min {
        t.sender_min_total = v;
    }
    t
}

pub fn portscan_report(case: &Case, p: &PortScanParams) -> Result<DetectionReport, CaseError> {
    Ok(port_scan_report(case.store(), p.day, &thresholds(p), &limits(p.max_buckets))?)
}

pub fn portscan(case: &Case, p: &PortScanParams) -> Result<serde_json::Value, CaseError> {
    Ok(portscan_report(case, p)?.to_json())
}

pub fn histogram(case: &Case, p: &HistogramParams) -> Result<IntervalHistogram, CaseError> {
    let mut t = DetectionThresholds::default();
    if let Some(f) = p.pair_floor {
        t.pair_floor_for_histogram = f;
    }
    Ok(interval_histogram(case.store(), p.day, &t, &limits(p.max_buckets))?)
}

pub fn query(case: &Case, q: &QueryRequest) -> Result<QueryResponse, CaseError> {
    let store = case.store();
    Ok(QueryResponse {
        total: store.count(&q.filter)?,
        hits: store
            .query(&q.filter, q.limit, q.offset)?
            .iter()
            .map(Document::to_plain_json)
            .collect(),
    })
}

pub fn aggregate(case: &Case, a: &AggregateRequest) -> Result<serde_json::Value, CaseError> {
    let r = case
        .store()
        .aggregate(&a.filter, &a.aggregation, &limits(a.max_buckets))?;
    Ok(r.to_json())
}

/// Maps request input paths into the case's data directory.
pub fn resolve_inputs(case: &Case, inputs: &[String]) -> Result<Vec<PathBuf>, CaseError> {
    let root = case.data_root();
    inputs
        .iter()
        .map(|p| root.resolve(p).map_err(CaseError::from))
        .collect()
}

pub fn backup(engine: &Engine, case: &Arc<Case>, out: Option<PathBuf>) -> Result<BackupResponse, CaseError> {
    let path = match out {
        Some(p) => p,
        None => {
            let dir = engine.data_root().join("backups");
            std::fs::create_dir_all(&dir).map_err(|source| CaseError::Io {
                path: dir.clone(),
                source,
            })?;
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            dir.join(format!("{}-{stamp}.tar.gz", case.id()))
        }
    };
    let bytes = case.backup(&path)?;
    Ok(BackupResponse {
        case_id: case.id().to_string(),
        path,
        bytes,
    })
}
