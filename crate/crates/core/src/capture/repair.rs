use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_header, CaptureError, CaptureHeader, PcapWriter, TsResolution, GLOBAL_HEADER_LEN,
    RECORD_HEADER_LEN,
};

/// Largest caplen accepted when judging whether bytes look like a record
/// header, for captures whose snaplen is smaller than real frames.
const PLAUSIBLE_MAX_LEN: u32 = 262_144;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixKind {
    TruncatedTail,
    CaplenClamped,
    LengthSwap,
    TsReordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fix {
    /// Byte offset of the affected record header in the input file.
    pub offset: u64,
    pub kind: FixKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub repaired: bool,
    pub records_kept: u64,
    pub records_dropped: u64,
    pub fixes: Vec<Fix>,
}

/// Repairs `capture_in` into `capture_out`.
///
/// Handled corruption: a truncated final record (kept with its caplen cut to
/// the bytes present, or dropped when no data byte remains), caplen larger
/// than snaplen (clamped), caplen/origlen swapped, and timestamps running
/// backwards (recorded only; records are not reordered). Well-formed records
/// are copied byte for byte.
pub fn repair(capture_in: &Path, capture_out: &Path) -> Result<RepairOutcome, CaptureError> {
    let input = fs::read(capture_in).map_err(|e| CaptureError::Io(e).in_file(capture_in))?;
    let (bytes, outcome) = repair_bytes(&input).map_err(|e| e.in_file(capture_in))?;
    fs::write(capture_out, bytes).map_err(|e| CaptureError::Io(e).in_file(capture_out))?;
    Ok(outcome)
}

pub fn repair_bytes(input: &[u8]) -> Result<(Vec<u8>, RepairOutcome), CaptureError> {
    let header = parse_header(input).map_err(|e| CaptureError::Unrepairable(e.to_string()))?;
    let mut w = PcapWriter {
        inner: input[..GLOBAL_HEADER_LEN].to_vec(),
        header,
    };
    let mut outcome = RepairOutcome::default();
    let snaplen = header.snaplen;
    let mut pos = GLOBAL_HEADER_LEN;
    let mut max_ts = None;

    while pos < input.len() {
        let offset = pos as u64;
        if input.len() - pos < RECORD_HEADER_LEN {
            outcome.drop_tail(offset);
            break;
        }
        let rh = header.record_header(&input[pos..]);
        let avail = input.len() - pos - RECORD_HEADER_LEN;
        let next = |len: u32| pos + RECORD_HEADER_LEN + len as usize;
        let fits = |len: u32| len as usize <= avail;

        let mut caplen = rh.caplen;
        let mut origlen = rh.origlen;
        let consume: u32;
        let mut fix = None;

        if caplen > origlen
            && origlen <= snaplen
            && fits(origlen)
            && plausible_at(input, &header, next(origlen))
        {
            std::mem::swap(&mut caplen, &mut origlen);
            consume = caplen;
            fix = Some(FixKind::LengthSwap);
        } else if caplen > snaplen || caplen > origlen {
            let limit = snaplen.min(origlen);
            if fits(caplen) && plausible_at(input, &header, next(caplen)) {
                consume = caplen;
            } else if fits(snaplen) && plausible_at(input, &header, next(snaplen)) {
                consume = snaplen;
            } else {
                // no trustworthy record boundary past this point
                outcome.drop_tail(offset);
                break;
            }
            caplen = limit.min(consume);
            fix = Some(FixKind::CaplenClamped);
        } else if !fits(caplen) {
            if avail == 0 {
                outcome.drop_tail(offset);
                break;
            }
            caplen = avail as u32;
            consume = caplen;
            fix = Some(FixKind::TruncatedTail);
        } else {
            consume = caplen;
        }

        if let Some(kind) = fix {
            outcome.fixes.push(Fix { offset, kind });
        }
        let ts = header.widen_ts(rh.ts_sec, rh.ts_subsec);
        if max_ts.is_some_and(|m| ts < m) {
            outcome.fixes.push(Fix {
                offset,
                kind: FixKind::TsReordered,
            });
        }
        max_ts = Some(max_ts.map_or(ts, |m: i64| m.max(ts)));

        let data_start = pos + RECORD_HEADER_LEN;
        if fix.is_none() {
            w.inner
                .extend_from_slice(&input[pos..data_start + consume as usize]);
        } else {
            let data = &input[data_start..data_start + caplen as usize];
            w.write_raw(rh.ts_sec, rh.ts_subsec, caplen, origlen, data)?;
        }
        outcome.records_kept += 1;
        pos = data_start + consume as usize;
    }

    outcome.repaired = !outcome.fixes.is_empty();
    Ok((w.inner, outcome))
}

impl RepairOutcome {
    fn drop_tail(&mut self, offset: u64) {
        self.fixes.push(Fix {
            offset,
            kind: FixKind::TruncatedTail,
        });
        self.records_dropped += 1;
    }
}

/// Whether a record boundary at `pos` is believable: end of file, a partial
/// trailing header, or a header with sane lengths and sub-second field.
fn plausible_at(input: &[u8], header: &CaptureHeader, pos: usize) -> bool {
    if pos > input.len() {
        return false;
    }
    if input.len() - pos < RECORD_HEADER_LEN {
        return true;
    }
    let rh = header.record_header(&input[pos..]);
    let subsec_limit = match header.ts_resolution {
        TsResolution::Microsecond => 1_000_000,
        TsResolution::Nanosecond => 1_000_000_000,
    };
    rh.ts_subsec < subsec_limit
        && rh.caplen.min(rh.origlen) <= header.snaplen.max(PLAUSIBLE_MAX_LEN)
}
