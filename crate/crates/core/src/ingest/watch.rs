use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};

use super::{run_import, ImportConfig, ImportRecord, ImportTarget, IngestError};

fn default_poll() -> u64 {
    30
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchConfig {
    pub watch_id: String,
    pub directory: PathBuf,
    /// Seconds between ticks.
    #[serde(default = "default_poll")]
    pub poll_interval: u64,
    pub config_id: String,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl WatchConfig {
    pub fn new(watch_id: &str, directory: impl Into<PathBuf>, config_id: &str) -> Self {
        WatchConfig {
            watch_id: watch_id.to_string(),
            directory: directory.into(),
            poll_interval: default_poll(),
            config_id: config_id.to_string(),
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidConfig(m));
        if self.watch_id.trim().is_empty() {
            return bad("watch_id is empty".into());
        }
        if self.poll_interval < 1 {
            return bad("poll_interval must be at least 1 second".into());
        }
        if !self.directory.is_dir() {
            return bad(format!("{} is not a directory", self.directory.display()));
        }
        Ok(())
    }
}

/// Size and modification time of a file at one poll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub size: u64,
    pub mtime_ns: u128,
}

/// Per-watch memory across ticks: files already handled and files seen
/// once and waiting for a second identical observation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchState {
    pub processed: BTreeSet<String>,
    pub pending: BTreeMap<String, Observation>,
}

fn observe(dir: &std::path::Path) -> std::io::Result<BTreeMap<String, Observation>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        let Some(name) = entry.file_name().to_str().map(str::to_string) else {
            continue;
        };
        if !meta.is_file() || name.starts_with('.') {
            continue;
        }
        let mtime_ns = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_nanos());
        out.insert(
            name,
            Observation {
                size: meta.len(),
                mtime_ns,
            },
        );
    }
    Ok(out)
}

/// One poll of a watched directory. A file is imported once its name is
/// not in the processed ledger and its size and mtime match the previous
/// poll. It enters the ledger whatever the import outcome, so a bad file is
/// not retried on every tick. Per-file problems are logged, never raised.
pub fn watchdog_tick(
    target: &ImportTarget<'_>,
    watch: &WatchConfig,
    config: &ImportConfig,
    state: &mut WatchState,
) -> Vec<ImportRecord> {
    if !watch.enabled {
        return Vec::new();
    }
    let seen = match observe(&watch.directory) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("watch {}: cannot list {}: {e}", watch.watch_id, watch.directory.display());
            return Vec::new();
        }
    };
    state.pending.retain(|name, _| seen.contains_key(name));
    let mut records = Vec::new();
    for (name, obs) in seen {
        if state.processed.contains(&name) {
            continue;
        }
        if state.pending.get(&name) != Some(&obs) {
            state.pending.insert(name, obs);
            continue;
        }
        state.pending.remove(&name);
        let rec = run_import(target, &[watch.directory.join(&name)], config);
        if !rec.succeeded() {
            log::warn!("watch {}: import of {name} failed: {:?}", watch.watch_id, rec.status);
        }
        state.processed.insert(name);
        records.push(rec);
    }
    records
}
