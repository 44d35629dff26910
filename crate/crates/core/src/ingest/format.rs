use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::capture::{MAGIC_MICROS, MAGIC_NANOS};

/// Archive nesting accepted by [`expand_archive`]: an archive inside an
/// archive is expanded, one more level is rejected.
pub const MAX_ARCHIVE_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Pcap,
    Csv,
    Json,
    Zip,
    Tgz,
}

impl FileFormat {
    pub fn is_archive(self) -> bool {
        matches!(self, FileFormat::Zip | FileFormat::Tgz)
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

fn first_line(path: &Path) -> io::Result<Option<String>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.by_ref().take(64 * 1024).read_until(b'\n', &mut buf)? == 0 {
            return Ok(None);
        }
        let Ok(line) = std::str::from_utf8(&buf) else {
            return Ok(None);
        };
        let line = line.trim_start_matches('\u{feff}').trim();
        if !line.is_empty() {
            return Ok(Some(line.to_string()));
        }
    }
}

fn looks_like_json(line: &str) -> bool {
    line.starts_with('{')
}

fn looks_like_csv(line: &str) -> bool {
    !line.chars().any(|c| c.is_control() && c != '\t')
}

/// Classifies a file by magic bytes, then by extension plus a first-line sniff.
pub fn detect_format(path: &Path) -> Result<FileFormat, IngestError> {
    let mut magic = [0u8; 4];
    let n = {
        let mut f = File::open(path).map_err(|e| IngestError::io(path, e))?;
        let mut n = 0;
        while n < 4 {
            match f.read(&mut magic[n..]).map_err(|e| IngestError::io(path, e))? {
                0 => break,
                k => n += k,
            }
        }
        n
    };
    if n == 4 {
        let le = u32::from_le_bytes(magic);
        let be = u32::from_be_bytes(magic);
        if [le, be].iter().any(|m| *m == MAGIC_MICROS || *m == MAGIC_NANOS) {
            return Ok(FileFormat::Pcap);
        }
        if magic == *b"PK\x03\x04" || magic == *b"PK\x05\x06" {
            return Ok(FileFormat::Zip);
        }
    }
    if n >= 2 && magic[..2] == [0x1f, 0x8b] {
        return Ok(FileFormat::Tgz);
    }
    let unknown = || IngestError::UnknownFormat(path.to_path_buf());
    let line = first_line(path).map_err(|e| IngestError::io(path, e))?;
    let Some(line) = line else {
        return Err(unknown());
    };
    match extension(path).as_deref() {
        Some("csv") if looks_like_csv(&line) => Ok(FileFormat::Csv),
        Some("json" | "jsonl" | "ndjson") if looks_like_json(&line) => Ok(FileFormat::Json),
        Some("csv" | "json" | "jsonl" | "ndjson") => Err(unknown()),
        _ if looks_like_json(&line) && serde_json::from_str::<serde_json::Value>(&line).is_ok() => {
            Ok(FileFormat::Json)
        }
        _ => Err(unknown()),
    }
}

/// Relative entry path with every component a plain name.
fn safe_entry_path(name: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in name.components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> IngestError {
    IngestError::CorruptArchive(format!("{}: {e}", path.display()))
}

fn expand_zip(path: &Path, workdir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| corrupt(path, e))?;
    let mut out = Vec::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| corrupt(path, e))?;
        let rel = safe_entry_path(Path::new(entry.name()))
            .ok_or_else(|| IngestError::UnsafePath(entry.name().to_string()))?;
        let dest = workdir.join(rel);
        if entry.is_dir() {
            fs::create_dir_all(&dest).map_err(|e| IngestError::io(&dest, e))?;
            continue;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        let mut f = File::create(&dest).map_err(|e| IngestError::io(&dest, e))?;
        io::copy(&mut entry, &mut f).map_err(|e| corrupt(path, e))?;
        out.push(dest);
    }
    Ok(out)
}

fn expand_tgz(path: &Path, workdir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(file));
    let mut out = Vec::new();
    for entry in tar.entries().map_err(|e| corrupt(path, e))? {
        let mut entry = entry.map_err(|e| corrupt(path, e))?;
        let name = entry.path().map_err(|e| corrupt(path, e))?.into_owned();
        let rel = safe_entry_path(&name)
            .ok_or_else(|| IngestError::UnsafePath(name.display().to_string()))?;
        let dest = workdir.join(rel);
        let kind = entry.header().entry_type();
        if kind.is_dir() {
            fs::create_dir_all(&dest).map_err(|e| IngestError::io(&dest, e))?;
            continue;
        }
        if !kind.is_file() {
            // links and devices are not data files
            continue;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        let mut f = File::create(&dest).map_err(|e| IngestError::io(&dest, e))?;
        io::copy(&mut entry, &mut f).map_err(|e| corrupt(path, e))?;
        out.push(dest);
    }
    Ok(out)
}

/// Extracts a zip or tar.gz archive under `workdir` and returns the extracted
/// regular files in archive order. Entries that would land outside
/// `workdir` fail with [`IngestError::UnsafePath`].
pub fn expand_archive(path: &Path, workdir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    fs::create_dir_all(workdir).map_err(|e| IngestError::io(workdir, e))?;
    match detect_format(path) {
        Ok(FileFormat::Zip) => expand_zip(path, workdir),
        Ok(FileFormat::Tgz) => expand_tgz(path, workdir),
        Ok(_) | Err(IngestError::UnknownFormat(_)) => Err(corrupt(path, "not a zip or tgz archive")),
        Err(e) => Err(e),
    }
}

/// A data file to import and the format it was detected as.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFile {
    pub path: PathBuf,
    pub format: FileFormat,
}

/// Resolves inputs to data files, expanding archives into numbered
/// subdirectories of `workdir`. A `forced` format overrides detection for
/// every non-archive file. Unrecognised files inside archives are skipped.
pub fn collect_inputs(
    inputs: &[PathBuf],
    workdir: &Path,
    forced: Option<FileFormat>,
) -> Result<Vec<DataFile>, IngestError> {
    let mut ctx = Collect {
        workdir,
        forced,
        next: 0,
        out: Vec::new(),
    };
    for input in inputs {
        ctx.add(input, 0)?;
    }
    Ok(ctx.out)
}

struct Collect<'a> {
    workdir: &'a Path,
    forced: Option<FileFormat>,
    next: usize,
    out: Vec<DataFile>,
}

impl Collect<'_> {
    fn add(&mut self, path: &Path, depth: usize) -> Result<(), IngestError> {
        let format = match (detect_format(path), self.forced) {
            (Ok(f), _) if f.is_archive() => f,
            (Ok(_) | Err(IngestError::UnknownFormat(_)), Some(forced)) => forced,
            (Ok(f), None) => f,
            (Err(IngestError::UnknownFormat(p)), None) if depth > 0 => {
                log::warn!("skipping unrecognised archive entry {}", p.display());
                return Ok(());
            }
            (Err(e), _) => return Err(e),
        };
        if !format.is_archive() {
            self.out.push(DataFile {
                path: path.to_path_buf(),
                format,
            });
            return Ok(());
        }
        if depth >= MAX_ARCHIVE_DEPTH {
            return Err(IngestError::ArchiveTooDeep(path.to_path_buf()));
        }
        let dest = self.workdir.join(format!("x{}", self.next));
        self.next += 1;
        for entry in expand_archive(path, &dest)? {
            self.add(&entry, depth + 1)?;
        }
        Ok(())
    }
}
