use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use super::{
    open_capture, parse_header, CaptureError, CaptureHeader, Micros, PacketReader, PacketRecord,
    GLOBAL_HEADER_LEN, RECORD_HEADER_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedRecord {
    /// Position of the originating file in the input list.
    pub source: usize,
    /// Position of the record within its file.
    pub index: u64,
    pub record: PacketRecord,
}

enum Source {
    Streaming {
        reader: PacketReader<BufReader<File>>,
        next_index: u64,
    },
    Buffered(VecDeque<(u64, PacketRecord)>),
}

impl Source {
    fn pull(&mut self) -> Result<Option<(u64, PacketRecord)>, CaptureError> {
        match self {
            Source::Streaming { reader, next_index } => match reader.next() {
                None => Ok(None),
                Some(Err(e)) => Err(e),
                Some(Ok(r)) => {
                    let i = *next_index;
                    *next_index += 1;
                    Ok(Some((i, r)))
                }
            },
            Source::Buffered(q) => Ok(q.pop_front()),
        }
    }
}

/// Globally time-ordered stream over several captures. Ties are broken by
/// (input position, record position). Files that are already in time order
/// are streamed; the rest are loaded and stably sorted first.
pub struct MergedStream {
    paths: Vec<PathBuf>,
    headers: Vec<CaptureHeader>,
    sources: Vec<Source>,
    heads: Vec<Option<PacketRecord>>,
    heap: BinaryHeap<Reverse<(Micros, usize, u64)>>,
    failed: bool,
}

pub fn merge<P: AsRef<Path>>(captures: &[P]) -> Result<MergedStream, CaptureError> {
    let mut stream = MergedStream {
        paths: captures.iter().map(|p| p.as_ref().to_path_buf()).collect(),
        headers: Vec::with_capacity(captures.len()),
        sources: Vec::with_capacity(captures.len()),
        heads: Vec::with_capacity(captures.len()),
        heap: BinaryHeap::new(),
        failed: false,
    };
    for (i, path) in captures.iter().enumerate() {
        let path = path.as_ref();
        let (header, ordered) = scan_order(path).map_err(|e| e.in_file(path))?;
        let source = if ordered {
            Source::Streaming {
                reader: open_capture(path)?,
                next_index: 0,
            }
        } else {
            let reader = open_capture(path)?;
            let mut recs = reader
                .enumerate()
                .map(|(i, r)| r.map(|r| (i as u64, r)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.in_file(path))?;
            recs.sort_by_key(|(i, r)| (r.ts, *i));
            Source::Buffered(recs.into())
        };
        stream.headers.push(header);
        stream.sources.push(source);
        stream.heads.push(None);
        stream.refill(i)?;
    }
    Ok(stream)
}

impl MergedStream {
    pub fn headers(&self) -> &[CaptureHeader] {
        &self.headers
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    fn refill(&mut self, source: usize) -> Result<(), CaptureError> {
        let pulled = self.sources[source]
            .pull()
            .map_err(|e| e.in_file(&self.paths[source]))?;
        if let Some((index, rec)) = pulled {
            self.heap.push(Reverse((rec.ts, source, index)));
            self.heads[source] = Some(rec);
        }
        Ok(())
    }
}

impl Iterator for MergedStream {
    type Item = Result<MergedRecord, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let Reverse((_, source, index)) = self.heap.pop()?;
        let record = self.heads[source].take().expect("head present for queued source");
        if let Err(e) = self.refill(source) {
            self.failed = true;
            return Some(Err(e));
        }
        Some(Ok(MergedRecord {
            source,
            index,
            record,
        }))
    }
}

/// Walks record headers only, checking timestamps never decrease.
fn scan_order(path: &Path) -> Result<(CaptureHeader, bool), CaptureError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut gh = [0u8; GLOBAL_HEADER_LEN];
    let n = read_up_to(&mut f, &mut gh)?;
    let header = parse_header(&gh[..n])?;
    let mut prev = Micros::MIN;
    let mut offset = GLOBAL_HEADER_LEN as u64;
    let mut rh = [0u8; RECORD_HEADER_LEN];
    loop {
        match read_up_to(&mut f, &mut rh)? {
            0 => return Ok((header, true)),
            RECORD_HEADER_LEN => {}
            _ => return Err(CaptureError::TruncatedRecord { offset }),
        }
        let h = header.record_header(&rh);
        let ts = header.widen_ts(h.ts_sec, h.ts_subsec);
        if ts < prev {
            return Ok((header, false));
        }
        prev = ts;
        f.seek(SeekFrom::Current(h.caplen as i64))?;
        offset += RECORD_HEADER_LEN as u64 + h.caplen as u64;
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    super::read_full(r, buf)
}
