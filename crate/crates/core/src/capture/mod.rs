//! Classic packet-capture files: header parsing, record reading and writing,
//! repair of common corruption, and time-ordered merging of several files.
//!
//! The on-disk layout is the classic one: a 24-byte global header followed by
//! records, each with a 16-byte header (`ts_sec`, `ts_subsec`, `caplen`,
//! `origlen`) and `caplen` bytes of frame data. Both byte orders and both
//! timestamp resolutions (micro/nano) are accepted. Timestamps are widened
//! to microseconds since the epoch; nanosecond fractions are truncated.

mod merge;
mod repair;

pub use merge::{merge, MergedRecord, MergedStream};
pub use repair::{repair, repair_bytes, Fix, FixKind, RepairOutcome};

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Microseconds since the Unix epoch.
pub type Micros = i64;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error("not a capture file (magic {0:#010x})")]
    UnknownMagic(u32),
    #[error("unsupported capture version {0}.{1}")]
    UnsupportedVersion(u16, u16),
    #[error("invalid capture header: {0}")]
    InvalidHeader(&'static str),
    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("invalid record at byte offset {offset}: {reason}")]
    InvalidRecord { offset: u64, reason: &'static str },
    #[error("unrepairable capture: {0}")]
    Unrepairable(String),
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<CaptureError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CaptureError {
    pub(crate) fn in_file(self, path: &Path) -> CaptureError {
        match self {
            e @ CaptureError::InFile { .. } => e,
            e => CaptureError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// The error with any file attribution stripped.
    pub fn root(&self) -> &CaptureError {
        match self {
            CaptureError::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsResolution {
    Microsecond,
    Nanosecond,
}

/// Byte order of a capture relative to little-endian, the order in which
/// the magic is first read. `Swapped` files are big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteOrder {
    Native,
    Swapped,
}

impl ByteOrder {
    pub fn read_u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Native => u32::from_le_bytes(a),
            ByteOrder::Swapped => u32::from_be_bytes(a),
        }
    }

    pub fn read_u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            ByteOrder::Native => u16::from_le_bytes(a),
            ByteOrder::Swapped => u16::from_be_bytes(a),
        }
    }

    pub fn u32_bytes(self, v: u32) -> [u8; 4] {
        match self {
            ByteOrder::Native => v.to_le_bytes(),
            ByteOrder::Swapped => v.to_be_bytes(),
        }
    }

    pub fn u16_bytes(self, v: u16) -> [u8; 2] {
        match self {
            ByteOrder::Native => v.to_le_bytes(),
            ByteOrder::Swapped => v.to_be_bytes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureHeader {
    pub magic: u32,
    pub version: (u16, u16),
    pub snaplen: u32,
    pub linktype: u32,
    pub ts_resolution: TsResolution,
    pub byte_order: ByteOrder,
}

impl CaptureHeader {
    pub fn ethernet(snaplen: u32) -> Self {
        CaptureHeader {
            magic: MAGIC_MICROS,
            version: (2, 4),
            snaplen,
            linktype: LINKTYPE_ETHERNET,
            ts_resolution: TsResolution::Microsecond,
            byte_order: ByteOrder::Native,
        }
    }

    /// The 24 header bytes in this header's byte order.
    pub fn to_bytes(&self) -> [u8; GLOBAL_HEADER_LEN] {
        let bo = self.byte_order;
        let mut out = [0u8; GLOBAL_HEADER_LEN];
        out[0..4].copy_from_slice(&bo.u32_bytes(self.magic));
        out[4..6].copy_from_slice(&bo.u16_bytes(self.version.0));
        out[6..8].copy_from_slice(&bo.u16_bytes(self.version.1));
        // thiszone and sigfigs stay zero
        out[16..20].copy_from_slice(&bo.u32_bytes(self.snaplen));
        out[20..24].copy_from_slice(&bo.u32_bytes(self.linktype));
        out
    }

    fn subsec_divisor(&self) -> i64 {
        match self.ts_resolution {
            TsResolution::Microsecond => 1,
            TsResolution::Nanosecond => 1000,
        }
    }

    pub(crate) fn widen_ts(&self, sec: u32, subsec: u32) -> Micros {
        sec as i64 * 1_000_000 + subsec as i64 / self.subsec_divisor()
    }

    pub(crate) fn record_header(&self, bytes: &[u8]) -> RecordHeader {
        let bo = self.byte_order;
        RecordHeader {
            ts_sec: bo.read_u32(&bytes[0..4]),
            ts_subsec: bo.read_u32(&bytes[4..8]),
            caplen: bo.read_u32(&bytes[8..12]),
            origlen: bo.read_u32(&bytes[12..16]),
        }
    }
}

/// Decodes the 24-byte global header. Byte order and timestamp resolution
/// follow solely from the magic.
pub fn parse_header(bytes: &[u8]) -> Result<CaptureHeader, CaptureError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(CaptureError::InvalidHeader("fewer than 24 bytes"));
    }
    let raw = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (byte_order, ts_resolution) = match raw {
        MAGIC_MICROS => (ByteOrder::Native, TsResolution::Microsecond),
        MAGIC_NANOS => (ByteOrder::Native, TsResolution::Nanosecond),
        m if m == MAGIC_MICROS.swap_bytes() => (ByteOrder::Swapped, TsResolution::Microsecond),
        m if m == MAGIC_NANOS.swap_bytes() => (ByteOrder::Swapped, TsResolution::Nanosecond),
        other => return Err(CaptureError::UnknownMagic(other)),
    };
    let bo = byte_order;
    let version = (bo.read_u16(&bytes[4..6]), bo.read_u16(&bytes[6..8]));
    if version != (2, 4) {
        return Err(CaptureError::UnsupportedVersion(version.0, version.1));
    }
    let snaplen = bo.read_u32(&bytes[16..20]);
    if snaplen == 0 {
        return Err(CaptureError::InvalidHeader("snaplen is zero"));
    }
    Ok(CaptureHeader {
        magic: bo.read_u32(&bytes[0..4]),
        version,
        snaplen,
        linktype: bo.read_u32(&bytes[20..24]),
        ts_resolution,
        byte_order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RecordHeader {
    pub ts_sec: u32,
    pub ts_subsec: u32,
    pub caplen: u32,
    pub origlen: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PacketRecord {
    pub ts: Micros,
    pub caplen: u32,
    pub origlen: u32,
    pub data: Vec<u8>,
}

impl PacketRecord {
    pub fn new(ts: Micros, data: Vec<u8>) -> Self {
        let len = data.len() as u32;
        PacketRecord {
            ts,
            caplen: len,
            origlen: len,
            data,
        }
    }
}

/// Streams records from a capture whose global header has already been
/// consumed. Records violating `caplen <= min(origlen, snaplen)` are
/// reported as errors; after the first error the reader yields nothing.
pub struct PacketReader<R> {
    inner: R,
    header: CaptureHeader,
    offset: u64,
    done: bool,
}

impl<R: Read> PacketReader<R> {
    pub fn new(inner: R, header: CaptureHeader) -> Self {
        PacketReader {
            inner,
            header,
            offset: GLOBAL_HEADER_LEN as u64,
            done: false,
        }
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    /// Byte offset of the next record header.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn next_record(&mut self) -> Result<Option<PacketRecord>, CaptureError> {
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        let offset = self.offset;
        if got < RECORD_HEADER_LEN {
            return Err(CaptureError::TruncatedRecord { offset });
        }
        let rh = self.header.record_header(&hdr);
        if rh.caplen > self.header.snaplen {
            return Err(CaptureError::InvalidRecord {
                offset,
                reason: "caplen exceeds snaplen",
            });
        }
        if rh.caplen > rh.origlen {
            return Err(CaptureError::InvalidRecord {
                offset,
                reason: "caplen exceeds origlen",
            });
        }
        let mut data = vec![0u8; rh.caplen as usize];
        if read_full(&mut self.inner, &mut data)? < data.len() {
            return Err(CaptureError::TruncatedRecord { offset });
        }
        self.offset += (RECORD_HEADER_LEN + data.len()) as u64;
        Ok(Some(PacketRecord {
            ts: self.header.widen_ts(rh.ts_sec, rh.ts_subsec),
            caplen: rh.caplen,
            origlen: rh.origlen,
            data,
        }))
    }
}

impl<R: Read> Iterator for PacketReader<R> {
    type Item = Result<PacketRecord, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads until `buf` is full or EOF; returns bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Parses the global header from `inner` and returns a reader positioned at
/// the first record.
pub fn read_packets<R: Read>(mut inner: R) -> Result<PacketReader<R>, CaptureError> {
    let mut buf = [0u8; GLOBAL_HEADER_LEN];
    let got = read_full(&mut inner, &mut buf)?;
    let header = parse_header(&buf[..got])?;
    Ok(PacketReader::new(inner, header))
}

pub fn open_capture(path: &Path) -> Result<PacketReader<BufReader<File>>, CaptureError> {
    let file = File::open(path).map_err(|e| CaptureError::Io(e).in_file(path))?;
    read_packets(BufReader::new(file)).map_err(|e| e.in_file(path))
}

/// Reads a whole capture into memory, failing on the first bad record.
pub fn read_all(path: &Path) -> Result<(CaptureHeader, Vec<PacketRecord>), CaptureError> {
    let reader = open_capture(path)?;
    let header = *reader.header();
    let records = reader
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.in_file(path))?;
    Ok((header, records))
}

pub struct PcapWriter<W: Write> {
    inner: W,
    header: CaptureHeader,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, header: CaptureHeader) -> io::Result<Self> {
        inner.write_all(&header.to_bytes())?;
        Ok(PcapWriter { inner, header })
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    /// Writes one record; `ts` is split back into the header's resolution.
    pub fn write(&mut self, rec: &PacketRecord) -> io::Result<()> {
        let sec = rec.ts.div_euclid(1_000_000) as u32;
        let micros = rec.ts.rem_euclid(1_000_000) as u32;
        let subsec = match self.header.ts_resolution {
            TsResolution::Microsecond => micros,
            TsResolution::Nanosecond => micros * 1000,
        };
        self.write_raw(sec, subsec, rec.caplen, rec.origlen, &rec.data)
    }

    pub(crate) fn write_raw(
        &mut self,
        sec: u32,
        subsec: u32,
        caplen: u32,
        origlen: u32,
        data: &[u8],
    ) -> io::Result<()> {
        let bo = self.header.byte_order;
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&bo.u32_bytes(sec));
        hdr[4..8].copy_from_slice(&bo.u32_bytes(subsec));
        hdr[8..12].copy_from_slice(&bo.u32_bytes(caplen));
        hdr[12..16].copy_from_slice(&bo.u32_bytes(origlen));
        self.inner.write_all(&hdr)?;
        self.inner.write_all(data)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Writes `records` as a fresh capture file.
pub fn write_capture(
    path: &Path,
    header: CaptureHeader,
    records: &[PacketRecord],
) -> io::Result<()> {
    let mut w = PcapWriter::new(BufWriter::new(File::create(path)?), header)?;
    for r in records {
        w.write(r)?;
    }
    w.into_inner().flush()
}

pub fn encode_capture(header: CaptureHeader, records: &[PacketRecord]) -> Vec<u8> {
    let mut w = PcapWriter::new(Vec::new(), header).expect("vec write");
    for r in records {
        w.write(r).expect("vec write");
    }
    w.into_inner()
}
