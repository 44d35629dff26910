//! Import orchestration: format detection, archive expansion, capture repair,
//! merge, decode, flow assembly, enrichment and indexing, plus import
//! history, watched directories and case file management.

mod files;
mod format;
mod tabular;
mod watch;

pub use files::{DataRoot, FileEntry, FileKind};
pub use format::{collect_inputs, detect_format, expand_archive, DataFile, FileFormat, MAX_ARCHIVE_DEPTH};
pub use tabular::parse_file;
pub use watch::{watchdog_tick, Observation, WatchConfig, WatchState};

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::capture::{self, CaptureError, RepairOutcome};
use crate::decode::{decode, Decoded};
use crate::flow::{AssemblyConfig, FlowAssembler, FlowError, NameTable};
use crate::store::{Document, SourceKind, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unknown format: {0}")]
    UnknownFormat(PathBuf),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("unsafe archive entry path `{0}`")]
    UnsafePath(String),
    #[error("archive nested deeper than {MAX_ARCHIVE_DEPTH} levels: {0}")]
    ArchiveTooDeep(PathBuf),
    #[error("path `{0}` is outside the case data root")]
    PathOutsideCase(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportKind {
    Pcap,
    Csv,
    Json,
    #[default]
    Auto,
}

impl ImportKind {
    fn forced(self) -> Option<FileFormat> {
        match self {
            ImportKind::Pcap => Some(FileFormat::Pcap),
            ImportKind::Csv => Some(FileFormat::Csv),
            ImportKind::Json => Some(FileFormat::Json),
            ImportKind::Auto => None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// A saved, reusable preprocessing configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportConfig {
    pub config_id: String,
    #[serde(default)]
    pub source_kind: ImportKind,
    #[serde(default = "default_true")]
    pub repair_enabled: bool,
    #[serde(default)]
    pub assembly: AssemblyConfig,
    /// `ip<TAB>name` lines used to label flow endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrichment_table: Option<PathBuf>,
    /// Partition day for CSV and JSON documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_day_override: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saved_name: Option<String>,
}

impl ImportConfig {
    pub fn new(config_id: &str) -> Self {
        ImportConfig {
            config_id: config_id.to_string(),
            source_kind: ImportKind::Auto,
            repair_enabled: true,
            assembly: AssemblyConfig::default(),
            enrichment_table: None,
            target_day_override: None,
            saved_name: None,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.config_id.trim().is_empty() {
            return Err(IngestError::InvalidConfig("config_id is empty".into()));
        }
        self.assembly.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ImportStatus {
    Running,
    Succeeded,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRepair {
    pub input: PathBuf,
    pub outcome: RepairOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportRecord {
    pub import_id: String,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub config_id: String,
    pub inputs: Vec<PathBuf>,
    pub docs_indexed: u64,
    pub packets_read: u64,
    pub packets_undecodable: u64,
    pub repair_outcomes: Vec<InputRepair>,
    pub status: ImportStatus,
}

impl ImportRecord {
    pub fn start(import_id: String, config_id: &str, inputs: &[PathBuf]) -> Self {
        ImportRecord {
            import_id,
            started: Utc::now(),
            finished: None,
            config_id: config_id.to_string(),
            inputs: inputs.to_vec(),
            docs_indexed: 0,
            packets_read: 0,
            packets_undecodable: 0,
            repair_outcomes: Vec::new(),
            status: ImportStatus::Running,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == ImportStatus::Succeeded
    }

    fn finish(&mut self, result: Result<(), IngestError>) {
        let now = Utc::now();
        self.finished = Some(now.max(self.started));
        self.status = match result {
            Ok(()) => ImportStatus::Succeeded,
            Err(e) => ImportStatus::Failed {
                reason: e.to_string(),
            },
        };
    }
}

/// Fresh import id: UTC start time plus a random suffix.
pub fn new_import_id() -> String {
    format!(
        "imp-{}-{:08x}",
        Utc::now().format("%Y%m%dT%H%M%S%6fZ"),
        rand::random::<u32>()
    )
}

/// Append-only import history (`history.jsonl`). A record is written when an
/// import starts and again when it ends; the last line per id wins.
#[derive(Debug, Clone)]
pub struct History {
    path: PathBuf,
}

impl History {
    pub fn new(path: &Path) -> Self {
        History {
            path: path.to_path_buf(),
        }
    }

    pub fn append(&self, rec: &ImportRecord) -> Result<(), IngestError> {
        let mut line = serde_json::to_vec(rec).expect("record serializes");
        line.push(b'\n');
        let io = |e| IngestError::io(&self.path, e);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io)?;
        f.write_all(&line).and_then(|_| f.sync_data()).map_err(io)
    }

    /// One record per import, in start order.
    pub fn list(&self) -> Result<Vec<ImportRecord>, IngestError> {
        let file = match fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(IngestError::io(&self.path, e)),
        };
        let mut order: Vec<String> = Vec::new();
        let mut latest: std::collections::HashMap<String, ImportRecord> = Default::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| IngestError::io(&self.path, e))?;
            // a torn final line from a crash is skipped
            let Ok(rec) = serde_json::from_str::<ImportRecord>(&line) else {
                continue;
            };
            if !latest.contains_key(&rec.import_id) {
                order.push(rec.import_id.clone());
            }
            latest.insert(rec.import_id.clone(), rec);
        }
        Ok(order
            .into_iter()
            .filter_map(|id| latest.remove(&id))
            .collect())
    }

    pub fn get(&self, import_id: &str) -> Result<Option<ImportRecord>, IngestError> {
        Ok(self.list()?.into_iter().find(|r| r.import_id == import_id))
    }

    /// Marks imports left running by a previous process as failed.
    pub fn fail_interrupted(&self) -> Result<usize, IngestError> {
        let stale: Vec<_> = self
            .list()?
            .into_iter()
            .filter(|r| r.status == ImportStatus::Running)
            .collect();
        for mut rec in stale.iter().cloned() {
            rec.finished = Some(Utc::now().max(rec.started));
            rec.status = ImportStatus::Failed {
                reason: "interrupted".into(),
            };
            self.append(&rec)?;
        }
        Ok(stale.len())
    }
}

/// Where an import reads and writes.
pub struct ImportTarget<'a> {
    pub store: &'a Store,
    pub history: &'a History,
    /// Scratch space; a subdirectory per import is removed afterwards.
    pub workdir: &'a Path,
}

/// Runs one import and records it in history, whether it succeeds or not.
pub fn run_import(target: &ImportTarget<'_>, inputs: &[PathBuf], config: &ImportConfig) -> ImportRecord {
    run_import_with_id(target, new_import_id(), inputs, config)
}

pub fn run_import_with_id(
    target: &ImportTarget<'_>,
    import_id: String,
    inputs: &[PathBuf],
    config: &ImportConfig,
) -> ImportRecord {
    let mut rec = ImportRecord::start(import_id, &config.config_id, inputs);
    if let Err(e) = target.history.append(&rec) {
        log::warn!("history write failed for {}: {e}", rec.import_id);
    }
    let scratch = target.workdir.join(&rec.import_id);
    let result = import_inputs(target, &scratch, inputs, config, &mut rec);
    if scratch.exists() {
        if let Err(e) = fs::remove_dir_all(&scratch) {
            log::warn!("could not remove {}: {e}", scratch.display());
        }
    }
    rec.finish(result);
    if let Err(e) = target.history.append(&rec) {
        log::error!("history write failed for {}: {e}", rec.import_id);
    }
    rec
}

fn import_inputs(
    target: &ImportTarget<'_>,
    scratch: &Path,
    inputs: &[PathBuf],
    config: &ImportConfig,
    rec: &mut ImportRecord,
) -> Result<(), IngestError> {
    config.validate()?;
    for input in inputs {
        if !input.is_file() {
            return Err(IngestError::NotFound(input.display().to_string()));
        }
    }
    let files = collect_inputs(inputs, &scratch.join("expanded"), config.source_kind.forced())?;
    let captures: Vec<&DataFile> = files.iter().filter(|f| f.format == FileFormat::Pcap).collect();
    if !captures.is_empty() {
        let docs = capture_documents(&captures, scratch, config, rec)?;
        rec.docs_indexed += target.store.index_batch(docs)?;
    }
    for file in files.iter().filter(|f| f.format != FileFormat::Pcap) {
        let kind = match file.format {
            FileFormat::Csv => SourceKind::Csv,
            _ => SourceKind::Json,
        };
        let docs = {
            let types = target.store.list_fields();
            let known = |f: &str| {
                types.get(f).map(|i| i.ty).or_else(|| {
                    crate::store::FLOW_FIELDS
                        .iter()
                        .find(|(n, _)| *n == f)
                        .map(|(_, t)| *t)
                })
            };
            parse_file(&file.path, kind, &known, config.target_day_override)?
        };
        // each file is its own batch
        rec.docs_indexed += target.store.index_batch(docs)?;
    }
    Ok(())
}

/// Repairs, merges, decodes and assembles captures into flow documents.
fn capture_documents(
    captures: &[&DataFile],
    scratch: &Path,
    config: &ImportConfig,
    rec: &mut ImportRecord,
) -> Result<Vec<Document>, IngestError> {
    let names = match &config.enrichment_table {
        Some(p) => NameTable::load(p).map_err(|e| IngestError::io(p, e))??,
        None => NameTable::default(),
    };
    let mut paths = Vec::with_capacity(captures.len());
    if config.repair_enabled {
        let dir = scratch.join("repaired");
        fs::create_dir_all(&dir).map_err(|e| IngestError::io(&dir, e))?;
        for (i, cap) in captures.iter().enumerate() {
            let out = dir.join(format!("{i}.pcap"));
            let outcome = capture::repair(&cap.path, &out).map_err(|e| e.in_file(&cap.path))?;
            rec.repair_outcomes.push(InputRepair {
                input: cap.path.clone(),
                outcome,
            });
            paths.push(out);
        }
    } else {
        paths.extend(captures.iter().map(|c| c.path.clone()));
    }
    let stream = capture::merge(&paths)?;
    let linktypes: Vec<u32> = stream.headers().iter().map(|h| h.linktype).collect();
    let mut assembler = FlowAssembler::new(config.assembly)?;
    let mut flows = Vec::new();
    for item in stream {
        let item = item?;
        rec.packets_read += 1;
        match decode(&item.record, linktypes[item.source]) {
            Decoded::Meta(meta) => flows.extend(assembler.push(&meta)?),
            Decoded::Undecodable(_) => rec.packets_undecodable += 1,
        }
    }
    flows.extend(assembler.finish());
    crate::flow::sort_flows(&mut flows);
    Ok(flows
        .iter_mut()
        .map(|f| {
            names.enrich(f);
            Document::from_flow(f)
        })
        .collect())
}
