use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the data root, `/`-separated.
    pub path: String,
    pub kind: FileKind,
    pub size: u64,
}

/// File management confined to one case's data directory. Paths are
/// relative; absolute paths, `..` and symlinks leading out are refused.
#[derive(Debug, Clone)]
pub struct DataRoot {
    root: PathBuf,
}

impl DataRoot {
    pub fn new(root: &Path) -> Self {
        DataRoot {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Maps a relative path to an absolute one under the root.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, IngestError> {
        let outside = || IngestError::PathOutsideCase(rel.to_string());
        let mut out = self.root.clone();
        let mut depth = 0;
        for c in Path::new(rel).components() {
            match c {
                Component::Normal(p) => {
                    out.push(p);
                    depth += 1;
                }
                Component::CurDir => {}
                _ => return Err(outside()),
            }
        }
        if depth == 0 {
            return Err(outside());
        }
        // follow whatever part exists to catch symlinks out of the root
        let root = fs::canonicalize(&self.root).map_err(|e| IngestError::io(&self.root, e))?;
        let mut probe = out.as_path();
        loop {
            if let Ok(real) = fs::canonicalize(probe) {
                if !real.starts_with(&root) {
                    return Err(outside());
                }
                break;
            }
            match probe.parent() {
                Some(p) => probe = p,
                None => break,
            }
        }
        Ok(out)
    }

    fn rel_of(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Every file and directory under the root, sorted by path.
    pub fn list(&self) -> Result<Vec<FileEntry>, IngestError> {
        let mut out = Vec::new();
        if self.root.is_dir() {
            self.walk(&self.root, &mut out)?;
        }
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }

    fn walk(&self, dir: &Path, out: &mut Vec<FileEntry>) -> Result<(), IngestError> {
        for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
            let entry = entry.map_err(|e| IngestError::io(dir, e))?;
            let path = entry.path();
            let meta = fs::symlink_metadata(&path).map_err(|e| IngestError::io(&path, e))?;
            if meta.is_dir() {
                out.push(FileEntry {
                    path: self.rel_of(&path),
                    kind: FileKind::Dir,
                    size: 0,
                });
                self.walk(&path, out)?;
            } else if meta.is_file() {
                out.push(FileEntry {
                    path: self.rel_of(&path),
                    kind: FileKind::File,
                    size: meta.len(),
                });
            }
        }
        Ok(())
    }

    /// Writes `bytes` to `rel`, creating parent directories and replacing
    /// any existing file.
    pub fn upload(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf, IngestError> {
        let dest = self.resolve(rel)?;
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        let tmp = dest.with_extension("part~");
        fs::write(&tmp, bytes).map_err(|e| IngestError::io(&tmp, e))?;
        fs::rename(&tmp, &dest).map_err(|e| IngestError::io(&dest, e))?;
        Ok(dest)
    }

    pub fn rename(&self, from: &str, to: &str) -> Result<PathBuf, IngestError> {
        let src = self.resolve(from)?;
        let dest = self.resolve(to)?;
        if fs::symlink_metadata(&src).is_err() {
            return Err(IngestError::NotFound(from.to_string()));
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        fs::rename(&src, &dest).map_err(|e| IngestError::io(&src, e))?;
        Ok(dest)
    }

    /// Removes a file or a directory tree.
    pub fn delete(&self, rel: &str) -> Result<(), IngestError> {
        let path = self.resolve(rel)?;
        let meta = fs::symlink_metadata(&path).map_err(|_| IngestError::NotFound(rel.to_string()))?;
        if meta.is_dir() {
            fs::remove_dir_all(&path)
        } else {
            fs::remove_file(&path)
        }
        .map_err(|e| IngestError::io(&path, e))
    }
}
