//! Isolated investigation cases under one data root.
//!
//! ```text
//! <data-root>/cases/<case_id>/
//!   case.json        manifest (versioned): id, state, saved import configs,
//!                    watches, history index, schema and partition counts
//!   store/           flow store (commit log and per-day partitions)
//!   history.jsonl    import records
//!   data/            uploaded files
//!   watch/<id>.json  watchdog ledger per watch
//!   work/            import scratch space, not backed up
//!   .lock            cross-process writer lock
//! ```
//!
//! A backup is a gzip-compressed tar holding `VERSION` and the case tree
//! under `case/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::detect::{daily_summary, DaySummary};
use crate::ingest::{
    new_import_id, run_import_with_id, watchdog_tick, DataRoot, History, ImportConfig,
    ImportRecord, ImportStatus, ImportTarget, IngestError, WatchConfig, WatchState,
};
use crate::store::{CleanupScope, Schema, Store, StoreError};

pub const MANIFEST_VERSION: u32 = 1;
pub const ARCHIVE_VERSION: u32 = 1;
const ARCHIVE_MAGIC: &str = "netcase-case-archive";
const CASES: &str = "cases";
const MANIFEST: &str = "case.json";
const LOCK: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("invalid case id `{0}`: use 1-64 of [a-z0-9_-], starting with a letter or digit")]
    InvalidId(String),
    #[error("case `{0}` already exists")]
    DuplicateId(String),
    #[error("case `{0}` not found")]
    NotFound(String),
    #[error("case `{0}` is busy with an import")]
    CaseBusy(String),
    #[error("case `{0}` is stopped")]
    CaseStopped(String),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("unknown import config `{0}`")]
    UnknownConfig(String),
    #[error("unknown watch `{0}`")]
    UnknownWatch(String),
    #[error("corrupt manifest {}: {reason}", path.display())]
    CorruptManifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaseError + '_ {
    move |source| CaseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Result<T, E = CaseError> = std::result::Result<T, E>;

pub fn validate_id(id: &str) -> Result<()> {
    let ok = (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
        && id.as_bytes()[0].is_ascii_alphanumeric();
    if ok {
        Ok(())
    } else {
        Err(CaseError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Active,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub case_id: String,
    pub created: DateTime<Utc>,
    pub state: CaseState,
    #[serde(default)]
    pub import_configs: BTreeMap<String, ImportConfig>,
    #[serde(default)]
    pub watches: BTreeMap<String, WatchConfig>,
    /// Import ids in start order.
    #[serde(default)]
    pub history_index: Vec<String>,
    #[serde(default)]
    pub schema: Schema,
    /// Live documents per partition file stem.
    #[serde(default)]
    pub partitions: BTreeMap<String, u64>,
}

impl Manifest {
    fn new(case_id: &str) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            case_id: case_id.to_string(),
            created: Utc::now(),
            state: CaseState::Active,
            import_configs: BTreeMap::new(),
            watches: BTreeMap::new(),
            history_index: Vec::new(),
            schema: Schema::new(),
            partitions: BTreeMap::new(),
        }
    }

    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| CaseError::CorruptManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.version > MANIFEST_VERSION {
            return Err(CaseError::CorruptManifest {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchStatus {
    pub watch_id: String,
    pub directory: PathBuf,
    pub enabled: bool,
    pub poll_interval: u64,
    pub processed: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStatus {
    pub case_id: String,
    pub state: CaseState,
    pub created: DateTime<Utc>,
    pub doc_count: u64,
    pub partitions: BTreeMap<String, u64>,
    pub days: Vec<DaySummary>,
    pub disk_bytes: u64,
    pub running_imports: Vec<String>,
    pub watches: Vec<WatchStatus>,
}

/// What an import should use: a saved config or a new one to save.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigRef {
    Saved(String),
    Inline(ImportConfig),
}

/// Exclusive writer lock on the case's `.lock` file, released on drop.
struct WriterLock(File);

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

pub struct Case {
    id: String,
    root: PathBuf,
    work: PathBuf,
    store: Store,
    history: History,
    manifest: Mutex<Manifest>,
    /// Serializes imports, ticks, cleanups and backups within the process.
    writer: Mutex<()>,
    running: Mutex<BTreeSet<String>>,
    watch_last_tick: Mutex<HashMap<String, Instant>>,
    destroyed: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Case {
    fn open(id: &str, root: &Path) -> Result<Case> {
        let lock_path = root.join(LOCK);
        let lock_file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        // a shared lock keeps other processes' writers out during replay
        lock_file.lock_shared().map_err(io_err(&lock_path))?;
        let store = Store::open(&root.join("store"));
        let _ = lock_file.unlock();
        let store = store?;
        let manifest = Manifest::load(&root.join(MANIFEST))?;
        for d in ["data", "watch", "work"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let case = Case {
            id: id.to_string(),
            root: root.to_path_buf(),
            work: root.join("work"),
            store,
            history: History::new(&root.join("history.jsonl")),
            manifest: Mutex::new(manifest),
            writer: Mutex::new(()),
            running: Mutex::new(BTreeSet::new()),
            watch_last_tick: Mutex::new(HashMap::new()),
            destroyed: AtomicBool::new(false),
        };
        Ok(case)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn history(&self) -> Result<Vec<ImportRecord>> {
        Ok(self.history.list()?)
    }

    pub fn import_record(&self, import_id: &str) -> Result<Option<ImportRecord>> {
        Ok(self.history.get(import_id)?)
    }

    pub fn manifest(&self) -> Manifest {
        lock(&self.manifest).clone()
    }

    pub fn data_root(&self) -> DataRoot {
        DataRoot::new(&self.root.join("data"))
    }

    pub fn state(&self) -> CaseState {
        lock(&self.manifest).state
    }

    fn writer_lock(&self, wait: bool) -> Result<WriterLock> {
        let path = self.root.join(LOCK);
        let f = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if wait {
            f.lock().map_err(io_err(&path))?;
        } else {
            match f.try_lock() {
                Ok(()) => {}
                Err(std::fs::TryLockError::WouldBlock) => {
                    return Err(CaseError::CaseBusy(self.id.clone()))
                }
                Err(std::fs::TryLockError::Error(e)) => return Err(io_err(&path)(e)),
            }
        }
        Ok(WriterLock(f))
    }

    fn update_manifest(&self, f: impl FnOnce(&mut Manifest)) -> Result<()> {
        let mut m = lock(&self.manifest);
        let mut next = m.clone();
        f(&mut next);
        next.schema = self.store.list_fields();
        next.partitions = self
            .store
            .partition_counts()
            .into_iter()
            .map(|(p, n)| (p.file_stem(), n))
            .collect();
        next.save(&self.root.join(MANIFEST))?;
        *m = next;
        Ok(())
    }

    fn ensure_active(&self) -> Result<()> {
        if self.destroyed.load(Ordering::SeqCst) {
            return Err(CaseError::NotFound(self.id.clone()));
        }
        match self.state() {
            CaseState::Active => Ok(()),
            CaseState::Stopped => Err(CaseError::CaseStopped(self.id.clone())),
        }
    }

    fn resolve_config(&self, config: ConfigRef) -> Result<ImportConfig> {
        match config {
            ConfigRef::Saved(id) => lock(&self.manifest)
                .import_configs
                .get(&id)
                .cloned()
                .ok_or(CaseError::UnknownConfig(id)),
            ConfigRef::Inline(c) => {
                c.validate()?;
                Ok(c)
            }
        }
    }

    /// Stores a reusable import config in the manifest.
    pub fn save_config(&self, config: ImportConfig) -> Result<()> {
        config.validate()?;
        self.update_manifest(|m| {
            m.import_configs.insert(config.config_id.clone(), config);
        })
    }

    /// Records a pending import and returns its id; run it with
    /// [`Case::run_import`]. Until then it shows as running in history.
    pub fn submit_import(&self, inputs: &[PathBuf], config: ConfigRef) -> Result<PendingImport> {
        self.ensure_active()?;
        let config = self.resolve_config(config)?;
        let id = new_import_id();
        let rec = ImportRecord::start(id.clone(), &config.config_id, inputs);
        self.history.append(&rec)?;
        lock(&self.running).insert(id.clone());
        self.update_manifest(|m| {
            m.import_configs
                .insert(config.config_id.clone(), config.clone());
            m.history_index.push(id.clone());
        })?;
        Ok(PendingImport {
            import_id: id,
            inputs: inputs.to_vec(),
            config,
        })
    }

    /// Runs a submitted import, waiting for any writer already active.
    pub fn run_import(&self, p: PendingImport) -> ImportRecord {
        let rec = {
            let _w = lock(&self.writer);
            match self.writer_lock(true) {
                Ok(_os) => {
                    let target = self.target();
                    run_import_with_id(&target, p.import_id.clone(), &p.inputs, &p.config)
                }
                Err(e) => {
                    let mut rec = ImportRecord::start(p.import_id.clone(), &p.config.config_id, &p.inputs);
                    rec.finished = Some(Utc::now());
                    rec.status = ImportStatus::Failed {
                        reason: e.to_string(),
                    };
                    let _ = self.history.append(&rec);
                    rec
                }
            }
        };
        lock(&self.running).remove(&p.import_id);
        if let Err(e) = self.update_manifest(|_| {}) {
            log::warn!("case {}: manifest refresh failed: {e}", self.id);
        }
        rec
    }

    /// Submits and runs an import synchronously.
    pub fn import(&self, inputs: &[PathBuf], config: ConfigRef) -> Result<ImportRecord> {
        let p = self.submit_import(inputs, config)?;
        Ok(self.run_import(p))
    }

    fn target(&self) -> ImportTarget<'_> {
        ImportTarget {
            store: &self.store,
            history: &self.history,
            workdir: &self.work,
        }
    }

    pub fn cleanup(&self, scope: CleanupScope) -> Result<u64> {
        let _w = lock(&self.writer);
        let _os = self.writer_lock(true)?;
        let n = self.store.cleanup(scope)?;
        self.update_manifest(|_| {})?;
        Ok(n)
    }

    /// Registers or replaces a watch. Returns false when the same config
    /// was already registered.
    /// A relative directory is taken relative to the case's `data/`.
    pub fn put_watch(&self, watch: WatchConfig) -> Result<bool> {
        self.resolve_watch(&watch).validate()?;
        {
            let m = lock(&self.manifest);
            if !m.import_configs.contains_key(&watch.config_id) {
                return Err(CaseError::UnknownConfig(watch.config_id.clone()));
            }
            if m.watches.get(&watch.watch_id) == Some(&watch) {
                return Ok(false);
            }
        }
        self.update_manifest(|m| {
            m.watches.insert(watch.watch_id.clone(), watch);
        })?;
        Ok(true)
    }

    pub fn remove_watch(&self, watch_id: &str) -> Result<()> {
        if !lock(&self.manifest).watches.contains_key(watch_id) {
            return Err(CaseError::UnknownWatch(watch_id.to_string()));
        }
        self.update_manifest(|m| {
            m.watches.remove(watch_id);
        })?;
        let p = self.watch_state_path(watch_id);
        if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
        lock(&self.watch_last_tick).remove(watch_id);
        Ok(())
    }

    fn resolve_watch(&self, watch: &WatchConfig) -> WatchConfig {
        let mut w = watch.clone();
        if w.directory.is_relative() {
            w.directory = self.root.join("data").join(&w.directory);
        }
        w
    }

    fn watch_state_path(&self, watch_id: &str) -> PathBuf {
        self.root.join("watch").join(format!("{watch_id}.json"))
    }

    fn load_watch_state(&self, watch_id: &str) -> WatchState {
        fs::read(self.watch_state_path(watch_id))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    /// One poll of a registered watch, regardless of its interval.
    pub fn tick_watch(&self, watch_id: &str) -> Result<Vec<ImportRecord>> {
        self.ensure_active()?;
        let (watch, config) = {
            let m = lock(&self.manifest);
            let w = m
                .watches
                .get(watch_id)
                .cloned()
                .ok_or_else(|| CaseError::UnknownWatch(watch_id.to_string()))?;
            let c = m
                .import_configs
                .get(&w.config_id)
                .cloned()
                .ok_or_else(|| CaseError::UnknownConfig(w.config_id.clone()))?;
            (w, c)
        };
        let records = {
            let _w = lock(&self.writer);
            let _os = self.writer_lock(true)?;
            let mut state = self.load_watch_state(watch_id);
            let watch = self.resolve_watch(&watch);
            let records = watchdog_tick(&self.target(), &watch, &config, &mut state);
            let path = self.watch_state_path(watch_id);
            let bytes = serde_json::to_vec(&state).expect("watch state serializes");
            fs::write(&path, bytes).map_err(io_err(&path))?;
            records
        };
        lock(&self.watch_last_tick).insert(watch_id.to_string(), Instant::now());
        if !records.is_empty() {
            self.update_manifest(|m| {
                m.history_index
                    .extend(records.iter().map(|r| r.import_id.clone()))
            })?;
        }
        Ok(records)
    }

    /// Ticks every enabled watch whose poll interval has elapsed.
    pub fn tick_due_watches(&self) -> Vec<ImportRecord> {
        if self.ensure_active().is_err() {
            return Vec::new();
        }
        let due: Vec<String> = {
            let m = lock(&self.manifest);
            let last = lock(&self.watch_last_tick);
            m.watches
                .values()
                .filter(|w| w.enabled)
                .filter(|w| {
                    last.get(&w.watch_id)
                        .is_none_or(|t| t.elapsed() >= Duration::from_secs(w.poll_interval))
                })
                .map(|w| w.watch_id.clone())
                .collect()
        };
        let mut out = Vec::new();
        for id in due {
            match self.tick_watch(&id) {
                Ok(recs) => out.extend(recs),
                Err(e) => log::warn!("case {}: watch {id}: {e}", self.id),
            }
        }
        out
    }

    /// Quiesces the case: waits for the running import, then refuses new
    /// imports and watch ticks until started again.
    pub fn stop(&self) -> Result<()> {
        let _w = lock(&self.writer);
        self.update_manifest(|m| m.state = CaseState::Stopped)
    }

    pub fn start(&self) -> Result<()> {
        self.update_manifest(|m| m.state = CaseState::Active)
    }

    pub fn status(&self) -> Result<CaseStatus> {
        let m = self.manifest();
        let watches = m
            .watches
            .values()
            .map(|w| {
                let s = self.load_watch_state(&w.watch_id);
                WatchStatus {
                    watch_id: w.watch_id.clone(),
                    directory: w.directory.clone(),
                    enabled: w.enabled,
                    poll_interval: w.poll_interval,
                    processed: s.processed.len(),
                    pending: s.pending.len(),
                }
            })
            .collect();
        Ok(CaseStatus {
            case_id: self.id.clone(),
            state: m.state,
            created: m.created,
            doc_count: self.store.doc_count(),
            partitions: self
                .store
                .partition_counts()
                .into_iter()
                .map(|(p, n)| (p.file_stem(), n))
                .collect(),
            days: daily_summary(&self.store),
            disk_bytes: dir_size(&self.root)?,
            running_imports: lock(&self.running).iter().cloned().collect(),
            watches,
        })
    }

    /// Writes a gzip-compressed tar of the case to `out` and returns its size.
    pub fn backup(&self, out: &Path) -> Result<u64> {
        let _w = match self.writer.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(e)) => e.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(CaseError::CaseBusy(self.id.clone())),
        };
        if !lock(&self.running).is_empty() {
            return Err(CaseError::CaseBusy(self.id.clone()));
        }
        let _os = self.writer_lock(false)?;
        let tmp = out.with_extension("partial");
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let gz = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        let mut tar = tar::Builder::new(gz);
        tar.mode(tar::HeaderMode::Deterministic);
        let stamp = format!("{ARCHIVE_MAGIC} {ARCHIVE_VERSION}\n");
        let mut header = tar::Header::new_gnu();
        header.set_size(stamp.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        let write = |e: std::io::Error| io_err(&tmp)(e);
        tar.append_data(&mut header, "VERSION", stamp.as_bytes())
            .map_err(write)?;
        for entry in walk(&self.root)? {
            let rel = entry.strip_prefix(&self.root).expect("walk stays under root");
            let top = rel.components().next().map(|c| c.as_os_str());
            if top == Some("work".as_ref()) || top == Some(LOCK.as_ref()) {
                continue;
            }
            let name = Path::new("case").join(rel);
            if entry.is_dir() {
                tar.append_dir(&name, &entry).map_err(write)?;
            } else {
                tar.append_path_with_name(&entry, &name).map_err(write)?;
            }
        }
        let gz = tar.into_inner().map_err(write)?;
        let file = gz.finish().map_err(write)?;
        file.sync_all().map_err(write)?;
        fs::rename(&tmp, out).map_err(io_err(out))?;
        Ok(fs::metadata(out).map_err(io_err(out))?.len())
    }
}

/// Handle for an import recorded but not yet run.
#[derive(Debug, Clone)]
pub struct PendingImport {
    pub import_id: String,
    pub inputs: Vec<PathBuf>,
    pub config: ImportConfig,
}

/// Every file and directory below `root`, parents before children, sorted.
fn walk(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(io_err(&dir))?;
        entries.sort();
        for p in entries.into_iter().rev() {
            let meta = fs::symlink_metadata(&p).map_err(io_err(&p))?;
            if meta.is_dir() {
                stack.push(p.clone());
                out.push(p);
            } else if meta.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn dir_size(root: &Path) -> Result<u64> {
    Ok(walk(root)?
        .iter()
        .filter_map(|p| fs::symlink_metadata(p).ok())
        .filter(|m| m.is_file())
        .map(|m| m.len())
        .sum())
}

/// All cases under one data root.
pub struct Engine {
    root: PathBuf,
    /// Open cases; create, destroy and restore hold this lock.
    registry: Mutex<HashMap<String, Arc<Case>>>,
}

impl Engine {
    pub fn open(data_root: &Path) -> Result<Engine> {
        let cases = data_root.join(CASES);
        fs::create_dir_all(&cases).map_err(io_err(&cases))?;
        Ok(Engine {
            root: data_root.to_path_buf(),
            registry: Mutex::new(HashMap::new()),
        })
    }

    pub fn data_root(&self) -> &Path {
        &self.root
    }

    fn case_root(&self, id: &str) -> PathBuf {
        self.root.join(CASES).join(id)
    }

    pub fn create_case(&self, id: &str) -> Result<Arc<Case>> {
        validate_id(id)?;
        let mut reg = lock(&self.registry);
        let root = self.case_root(id);
        if root.exists() {
            return Err(CaseError::DuplicateId(id.to_string()));
        }
        let tmp = self.root.join(CASES).join(format!(".new-{id}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        for d in ["store", "data", "watch", "work"] {
            let p = tmp.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Manifest::new(id).save(&tmp.join(MANIFEST))?;
        fs::rename(&tmp, &root).map_err(io_err(&root))?;
        let case = Arc::new(Case::open(id, &root)?);
        reg.insert(id.to_string(), case.clone());
        Ok(case)
    }

    /// Case ids present on disk, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let dir = self.root.join(CASES);
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(MANIFEST).is_file())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| validate_id(n).is_ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn case(&self, id: &str) -> Result<Arc<Case>> {
        let mut reg = lock(&self.registry);
        if let Some(c) = reg.get(id) {
            return Ok(c.clone());
        }
        if validate_id(id).is_err() {
            return Err(CaseError::NotFound(id.to_string()));
        }
        let root = self.case_root(id);
        if !root.join(MANIFEST).is_file() {
            return Err(CaseError::NotFound(id.to_string()));
        }
        let case = Arc::new(Case::open(id, &root)?);
        match case.history.fail_interrupted() {
            Ok(n) if n > 0 => log::warn!("case {id}: marked {n} interrupted import(s) failed"),
            Ok(_) => {}
            Err(e) => log::warn!("case {id}: history recovery failed: {e}"),
        }
        reg.insert(id.to_string(), case.clone());
        Ok(case)
    }

    /// Cases already opened in this process.
    pub fn open_cases(&self) -> Vec<Arc<Case>> {
        lock(&self.registry).values().cloned().collect()
    }

    pub fn status(&self, id: &str) -> Result<CaseStatus> {
        self.case(id)?.status()
    }

    /// Status of every case, sorted by id.
    pub fn status_all(&self) -> Result<Vec<CaseStatus>> {
        self.list()?.iter().map(|id| self.status(id)).collect()
    }

    pub fn destroy_case(&self, id: &str) -> Result<()> {
        let case = self.case(id)?;
        let mut reg = lock(&self.registry);
        {
            let _w = match case.writer.try_lock() {
                Ok(g) => g,
                Err(TryLockError::Poisoned(e)) => e.into_inner(),
                Err(TryLockError::WouldBlock) => return Err(CaseError::CaseBusy(id.to_string())),
            };
            if !lock(&case.running).is_empty() {
                return Err(CaseError::CaseBusy(id.to_string()));
            }
            let _os = case.writer_lock(false)?;
            case.destroyed.store(true, Ordering::SeqCst);
            reg.remove(id);
            fs::remove_dir_all(&case.root).map_err(io_err(&case.root))?;
        }
        Ok(())
    }

    /// Restores a backup archive as a new case.
    pub fn restore_case(&self, archive: &Path, new_id: &str) -> Result<Arc<Case>> {
        validate_id(new_id)?;
        let mut reg = lock(&self.registry);
        let root = self.case_root(new_id);
        if root.exists() {
            return Err(CaseError::DuplicateId(new_id.to_string()));
        }
        let staging = self.root.join(CASES).join(format!(".restore-{new_id}"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let result = unpack_backup(archive, &staging).and_then(|()| {
            let case_dir = staging.join("case");
            let mpath = case_dir.join(MANIFEST);
            let mut m = Manifest::load(&mpath)
                .map_err(|e| CaseError::CorruptArchive(format!("manifest: {e}")))?;
            m.case_id = new_id.to_string();
            m.state = CaseState::Active;
            m.save(&mpath)?;
            for d in ["store", "data", "watch", "work"] {
                let p = case_dir.join(d);
                fs::create_dir_all(&p).map_err(io_err(&p))?;
            }
            fs::rename(&case_dir, &root).map_err(io_err(&root))
        });
        let _ = fs::remove_dir_all(&staging);
        result?;
        let case = match Case::open(new_id, &root) {
            Ok(c) => Arc::new(c),
            Err(e) => {
                let _ = fs::remove_dir_all(&root);
                return Err(CaseError::CorruptArchive(e.to_string()));
            }
        };
        reg.insert(new_id.to_string(), case.clone());
        Ok(case)
    }
}

fn unpack_backup(archive: &Path, dest: &Path) -> Result<()> {
    let corrupt = |m: String| CaseError::CorruptArchive(format!("{}: {m}", archive.display()));
    let file = File::open(archive).map_err(io_err(archive))?;
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(file));
    let mut stamp_ok = false;
    let mut saw_manifest = false;
    for entry in tar.entries().map_err(|e| corrupt(e.to_string()))? {
        let mut entry = entry.map_err(|e| corrupt(e.to_string()))?;
        let name = entry
            .path()
            .map_err(|e| corrupt(e.to_string()))?
            .into_owned();
        if name.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(corrupt(format!("unsafe entry {}", name.display())));
        }
        if name == Path::new("VERSION") {
            let mut s = String::new();
            entry
                .read_to_string(&mut s)
                .map_err(|e| corrupt(e.to_string()))?;
            stamp_ok = s.trim() == format!("{ARCHIVE_MAGIC} {ARCHIVE_VERSION}");
            if !stamp_ok {
                return Err(corrupt(format!("unsupported version stamp `{}`", s.trim())));
            }
            continue;
        }
        if !name.starts_with("case") {
            return Err(corrupt(format!("unexpected entry {}", name.display())));
        }
        let kind = entry.header().entry_type();
        if !(kind.is_dir() || kind.is_file()) {
            return Err(corrupt(format!("unexpected entry type for {}", name.display())));
        }
        saw_manifest |= name == Path::new("case").join(MANIFEST);
        let target = dest.join(&name);
        if kind.is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else {
            if let Some(p) = target.parent() {
                fs::create_dir_all(p).map_err(io_err(p))?;
            }
            let mut f = File::create(&target).map_err(io_err(&target))?;
            std::io::copy(&mut entry, &mut f).map_err(|e| corrupt(e.to_string()))?;
        }
    }
    if !stamp_ok {
        return Err(corrupt("missing version stamp".into()));
    }
    if !saw_manifest {
        return Err(corrupt("missing case manifest".into()));
    }
    Ok(())
}
