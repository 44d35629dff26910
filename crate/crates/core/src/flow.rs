//! Bidirectional flow assembly from decoded packets.
//!
//! Packets are grouped by the unordered 5-tuple. A flow is emitted once it
//! has been idle longer than its protocol's timeout, 5 s after a TCP reset
//! or after FINs in both directions, or at end of input. The originator is
//! the sender of the first bare SYN, else the sender of the first packet.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::net::IpAddr;
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::Micros;
use crate::decode::{PacketMeta, TcpFlags, Transport};

const MICROS: i64 = 1_000_000;
/// Timestamps may step back this far before input is rejected.
pub const REORDER_TOLERANCE: Micros = MICROS;
/// Grace period a TCP flow stays open after RST or bidirectional FIN.
pub const TCP_CLOSE_GRACE: Micros = 5 * MICROS;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("packet at {ts} is more than 1 s older than already processed time {watermark}")]
    OutOfOrderInput { ts: Micros, watermark: Micros },
    #[error("invalid assembly config: {0}")]
    InvalidConfig(&'static str),
    #[error("name table line {line}: {reason}")]
    NameTable { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub tcp_idle_timeout: u64,
    pub udp_idle_timeout: u64,
    pub other_idle_timeout: u64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            tcp_idle_timeout: 300,
            udp_idle_timeout: 60,
            other_idle_timeout: 60,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.tcp_idle_timeout == 0 || self.udp_idle_timeout == 0 || self.other_idle_timeout == 0
        {
            return Err(FlowError::InvalidConfig("idle timeouts must be positive"));
        }
        Ok(())
    }

    fn timeout(&self, proto: Transport) -> Micros {
        let secs = match proto {
            Transport::Tcp => self.tcp_idle_timeout,
            Transport::Udp => self.udp_idle_timeout,
            _ => self.other_idle_timeout,
        };
        secs as i64 * MICROS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: String,
    pub orig_ip: IpAddr,
    pub orig_port: u16,
    pub resp_ip: IpAddr,
    pub resp_port: u16,
    pub proto: Transport,
    pub first_ts: Micros,
    pub last_ts: Micros,
    pub duration: Micros,
    pub orig_bytes: u64,
    pub resp_bytes: u64,
    pub orig_pkts: u64,
    pub resp_pkts: u64,
    pub day: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resp_name: Option<String>,
}

/// UTC calendar date of a microsecond timestamp.
pub fn utc_day(ts: Micros) -> NaiveDate {
    DateTime::from_timestamp_micros(ts)
        .map(|d| d.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

type Endpoint = (IpAddr, u16);

/// Unordered 5-tuple: `a <= b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub a: Endpoint,
    pub b: Endpoint,
    pub proto: Transport,
}

impl FlowKey {
    /// Key for `meta` and whether the packet travels a → b.
    pub fn of(meta: &PacketMeta) -> (FlowKey, bool) {
        let src = (meta.src_ip, meta.src_port);
        let dst = (meta.dst_ip, meta.dst_port);
        if src <= dst {
            (FlowKey { a: src, b: dst, proto: meta.proto }, true)
        } else {
            (FlowKey { a: dst, b: src, proto: meta.proto }, false)
        }
    }
}

#[derive(Debug, Clone)]
struct FlowState {
    generation: u64,
    first_ts: Micros,
    last_ts: Micros,
    pkts: [u64; 2],
    bytes: [u64; 2],
    first_from_a: bool,
    syn_from_a: Option<bool>,
    fin: [bool; 2],
    close_at: Option<Micros>,
}

impl FlowState {
    fn deadline(&self, idle: Micros) -> Micros {
        let idle_end = self.last_ts + idle;
        self.close_at.map_or(idle_end, |c| c.min(idle_end))
    }
}

pub struct FlowAssembler {
    config: AssemblyConfig,
    active: HashMap<FlowKey, FlowState>,
    expiry: BinaryHeap<Reverse<(Micros, FlowKey, u64)>>,
    watermark: Option<Micros>,
    next_generation: u64,
    packets: u64,
}

impl FlowAssembler {
    pub fn new(config: AssemblyConfig) -> Result<Self, FlowError> {
        config.validate()?;
        Ok(FlowAssembler {
            config,
            active: HashMap::new(),
            expiry: BinaryHeap::new(),
            watermark: None,
            next_generation: 0,
            packets: 0,
        })
    }

    pub fn packets_consumed(&self) -> u64 {
        self.packets
    }

    pub fn active_flows(&self) -> usize {
        self.active.len()
    }

    /// Adds one packet; returns any flows that ended before it.
    pub fn push(&mut self, meta: &PacketMeta) -> Result<Vec<FlowRecord>, FlowError> {
        let ts = meta.ts;
        if let Some(w) = self.watermark {
            if ts < w - REORDER_TOLERANCE {
                return Err(FlowError::OutOfOrderInput { ts, watermark: w });
            }
        }
        let now = self.watermark.map_or(ts, |w| w.max(ts));
        self.watermark = Some(now);
        let mut done = self.expire_before(now);

        let (key, from_a) = FlowKey::of(meta);
        let idle = self.config.timeout(key.proto);
        if let Some(state) = self.active.get(&key) {
            if ts > state.deadline(idle) {
                let state = self.active.remove(&key).expect("present");
                done.push(finish_flow(&key, &state));
            }
        }
        let state = match self.active.get_mut(&key) {
            Some(s) => s,
            None => {
                let generation = self.next_generation;
                self.next_generation += 1;
                let s = FlowState {
                    generation,
                    first_ts: ts,
                    last_ts: ts,
                    pkts: [0; 2],
                    bytes: [0; 2],
                    first_from_a: from_a,
                    syn_from_a: None,
                    fin: [false; 2],
                    close_at: None,
                };
                self.expiry.push(Reverse((s.deadline(idle), key, generation)));
                self.active.entry(key).or_insert(s)
            }
        };

        let dir = if from_a { 0 } else { 1 };
        state.pkts[dir] += 1;
        state.bytes[dir] += meta.payload_bytes as u64;
        state.first_ts = state.first_ts.min(ts);
        state.last_ts = state.last_ts.max(ts);
        if let Some(flags) = meta.tcp_flags.filter(|_| key.proto == Transport::Tcp) {
            if flags.contains(TcpFlags::SYN)
                && !flags.contains(TcpFlags::ACK)
                && state.syn_from_a.is_none()
            {
                state.syn_from_a = Some(from_a);
            }
            if flags.contains(TcpFlags::FIN) {
                state.fin[dir] = true;
            }
            let closing = flags.contains(TcpFlags::RST) || (state.fin[0] && state.fin[1]);
            if closing && state.close_at.is_none() {
                state.close_at = Some(ts + TCP_CLOSE_GRACE);
            }
        }
        self.packets += 1;
        Ok(done)
    }

    fn expire_before(&mut self, now: Micros) -> Vec<FlowRecord> {
        let mut done = Vec::new();
        while let Some(Reverse((deadline, key, generation))) = self.expiry.peek().copied() {
            if deadline >= now {
                break;
            }
            self.expiry.pop();
            let Some(state) = self.active.get(&key) else {
                continue;
            };
            if state.generation != generation {
                continue;
            }
            let current = state.deadline(self.config.timeout(key.proto));
            if current >= now {
                self.expiry.push(Reverse((current, key, generation)));
                continue;
            }
            let state = self.active.remove(&key).expect("present");
            done.push(finish_flow(&key, &state));
        }
        done
    }

    /// Flushes every open flow, ordered by (first_ts, flow_id).
    pub fn finish(self) -> Vec<FlowRecord> {
        let mut out: Vec<FlowRecord> = self
            .active
            .iter()
            .map(|(k, s)| finish_flow(k, s))
            .collect();
        sort_flows(&mut out);
        out
    }
}

pub fn sort_flows(flows: &mut [FlowRecord]) {
    flows.sort_by(|x, y| (x.first_ts, &x.flow_id).cmp(&(y.first_ts, &y.flow_id)));
}

fn flow_id(key: &FlowKey, first_ts: Micros) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "{}|{}|{}|{}|{}|{}",
        key.a.0, key.a.1, key.b.0, key.b.1, key.proto, first_ts
    ));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn finish_flow(key: &FlowKey, s: &FlowState) -> FlowRecord {
    let orig_is_a = s.syn_from_a.unwrap_or(s.first_from_a);
    let (o, r) = if orig_is_a { (0, 1) } else { (1, 0) };
    let (orig, resp) = if orig_is_a { (key.a, key.b) } else { (key.b, key.a) };
    FlowRecord {
        flow_id: flow_id(key, s.first_ts),
        orig_ip: orig.0,
        orig_port: orig.1,
        resp_ip: resp.0,
        resp_port: resp.1,
        proto: key.proto,
        first_ts: s.first_ts,
        last_ts: s.last_ts,
        duration: s.last_ts - s.first_ts,
        orig_bytes: s.bytes[o],
        resp_bytes: s.bytes[r],
        orig_pkts: s.pkts[o],
        resp_pkts: s.pkts[r],
        day: utc_day(s.first_ts),
        orig_name: None,
        resp_name: None,
    }
}

/// Assembles a whole packet sequence into flows. Flows ending mid-stream
/// come first in expiry order; the rest follow sorted by start time.
pub fn assemble<'a, I>(packets: I, config: AssemblyConfig) -> Result<Vec<FlowRecord>, FlowError>
where
    I: IntoIterator<Item = &'a PacketMeta>,
{
    let mut asm = FlowAssembler::new(config)?;
    let mut out = Vec::new();
    for p in packets {
        out.extend(asm.push(p)?);
    }
    out.extend(asm.finish());
    Ok(out)
}

/// Static ip → name table for enriching flows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameTable {
    names: HashMap<IpAddr, String>,
}

impl NameTable {
    /// Parses lines of `ip<TAB>name`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, FlowError> {
        let mut names = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| FlowError::NameTable {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (ip, name) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let ip: IpAddr = ip.trim().parse().map_err(|_| bad("bad ip address"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(bad("empty name"));
            }
            names.insert(ip, name.to_string());
        }
        Ok(NameTable { names })
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, FlowError>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn insert(&mut self, ip: IpAddr, name: impl Into<String>) {
        self.names.insert(ip, name.into());
    }

    pub fn get(&self, ip: &IpAddr) -> Option<&str> {
        self.names.get(ip).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn enrich(&self, flow: &mut FlowRecord) {
        flow.orig_name = self.get(&flow.orig_ip).map(str::to_string);
        flow.resp_name = self.get(&flow.resp_ip).map(str::to_string);
    }
}
