use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Document, Partition, Result, StoreError};

const COMMITS: &str = "commits.log";
const PARTITIONS: &str = "partitions";

#[derive(Serialize)]
struct EntryRef<'a> {
    batch: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    doc: Option<&'a Document>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delete: Option<&'a str>,
}

#[derive(Deserialize)]
struct Entry {
    batch: u64,
    #[serde(default)]
    doc: Option<Document>,
    #[serde(default)]
    delete: Option<String>,
}

/// A replayed log operation.
pub(super) enum Op {
    Put(Document),
    /// The document moved out of this partition.
    Delete(String, Partition),
}

pub(super) struct Log {
    dir: PathBuf,
    next_batch: u64,
}

/// Cuts a torn trailing line left by an interrupted append.
fn truncate_torn_tail(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

fn append_durably(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let before = f.metadata()?.len();
    let res = f.write_all(bytes).and_then(|_| f.sync_data());
    if let Err(e) = res {
        // leave no partial line behind
        let _ = f.set_len(before);
        return Err(e.into());
    }
    Ok(())
}

impl Log {
    /// Opens (creating if needed) and replays committed documents in batch order.
    pub(super) fn open(dir: &Path) -> Result<(Log, Vec<Op>)> {
        let parts = dir.join(PARTITIONS);
        fs::create_dir_all(&parts)?;
        let commits_path = dir.join(COMMITS);
        let mut committed = HashSet::new();
        let mut max_batch = 0u64;
        if commits_path.exists() {
            truncate_torn_tail(&commits_path)?;
            for line in BufReader::new(File::open(&commits_path)?).lines() {
                let line = line?;
                let id: u64 = line
                    .trim()
                    .parse()
                    .map_err(|_| StoreError::Corrupt(format!("bad commit line `{line}`")))?;
                committed.insert(id);
                max_batch = max_batch.max(id);
            }
        }
        let mut entries: Vec<(u64, Op)> = Vec::new();
        for path in partition_files(&parts)? {
            let part = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(Partition::from_file_stem)
                .ok_or_else(|| StoreError::Corrupt(format!("stray file {}", path.display())))?;
            truncate_torn_tail(&path)?;
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                let e: Entry = serde_json::from_str(&line).map_err(|err| {
                    StoreError::Corrupt(format!("{} line {}: {err}", path.display(), n + 1))
                })?;
                max_batch = max_batch.max(e.batch);
                if !committed.contains(&e.batch) {
                    continue;
                }
                match (e.doc, e.delete) {
                    (Some(doc), None) => entries.push((e.batch, Op::Put(doc))),
                    (None, Some(id)) => entries.push((e.batch, Op::Delete(id, part))),
                    _ => {
                        return Err(StoreError::Corrupt(format!(
                            "{} line {}: malformed entry",
                            path.display(),
                            n + 1
                        )))
                    }
                }
            }
        }
        // deletes before puts within a batch
        entries.sort_by_key(|(b, op)| (*b, matches!(op, Op::Put(_))));
        let docs = entries.into_iter().map(|(_, d)| d).collect();
        Ok((
            Log {
                dir: dir.to_path_buf(),
                next_batch: max_batch + 1,
            },
            docs,
        ))
    }

    fn partition_path(&self, p: Partition) -> PathBuf {
        self.dir.join(PARTITIONS).join(format!("{}.jsonl", p.file_stem()))
    }

    /// Appends `docs`, plus tombstones for ids leaving an older partition.
    pub(super) fn append_batch(
        &mut self,
        docs: &[Document],
        moved: &[(&str, Partition)],
    ) -> Result<()> {
        let batch = self.next_batch;
        self.next_batch += 1;
        // last occurrence of a doc_id within the batch wins
        let mut last: HashMap<&str, usize> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            last.insert(&d.doc_id, i);
        }
        let mut by_part: BTreeMap<Partition, Vec<u8>> = BTreeMap::new();
        for (i, doc) in docs.iter().enumerate() {
            if last[doc.doc_id.as_str()] != i {
                continue;
            }
            let buf = by_part.entry(Partition::of(doc.day)).or_default();
            let entry = EntryRef {
                batch,
                doc: Some(doc),
                delete: None,
            };
            serde_json::to_writer(&mut *buf, &entry).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            buf.push(b'\n');
        }
        for (id, part) in moved {
            let buf = by_part.entry(*part).or_default();
            let entry = EntryRef {
                batch,
                doc: None,
                delete: Some(id),
            };
            serde_json::to_writer(&mut *buf, &entry).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            buf.push(b'\n');
        }
        for (part, bytes) in &by_part {
            append_durably(&self.partition_path(*part), bytes)?;
        }
        append_durably(&self.dir.join(COMMITS), format!("{batch}\n").as_bytes())
    }

    pub(super) fn partitions(&self) -> Result<Vec<Partition>> {
        Ok(partition_files(&self.dir.join(PARTITIONS))?
            .iter()
            .filter_map(|p| p.file_stem()?.to_str().and_then(Partition::from_file_stem))
            .collect())
    }

    pub(super) fn remove_partition(&mut self, p: Partition) -> Result<()> {
        match fs::remove_file(self.partition_path(p)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

fn partition_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
