//! Ethernet / IPv4 / IPv6 / TCP / UDP header decoding into flow metadata.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::capture::{Micros, PacketRecord, LINKTYPE_ETHERNET};

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86dd;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_QINQ: u16 = 0x88a8;
pub const ETHERTYPE_ARP: u16 = 0x0806;

pub const IPPROTO_ICMP: u8 = 1;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;
pub const IPPROTO_ICMPV6: u8 = 58;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    Tcp,
    Udp,
    Icmp,
    Other(u8),
}

impl Transport {
    pub fn from_protocol(p: u8) -> Self {
        match p {
            IPPROTO_TCP => Transport::Tcp,
            IPPROTO_UDP => Transport::Udp,
            IPPROTO_ICMP | IPPROTO_ICMPV6 => Transport::Icmp,
            other => Transport::Other(other),
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, Transport::Tcp | Transport::Udp)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tcp" => Some(Transport::Tcp),
            "udp" => Some(Transport::Udp),
            "icmp" => Some(Transport::Icmp),
            other => other
                .strip_prefix("other(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse().ok())
                .map(Transport::Other),
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Tcp => f.write_str("tcp"),
            Transport::Udp => f.write_str("udp"),
            Transport::Icmp => f.write_str("icmp"),
            Transport::Other(p) => write!(f, "other({p})"),
        }
    }
}

impl Serialize for Transport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Transport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Transport::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad transport {s}")))
    }
}

/// The subset of TCP flags flow assembly cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    const MASK: u8 = 0x01 | 0x02 | 0x04 | 0x10;

    pub fn from_bits(raw: u8) -> Self {
        TcpFlags(raw & Self::MASK)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn empty() -> Self {
        TcpFlags(0)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub ts: Micros,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Transport,
    pub payload_bytes: u32,
    pub tcp_flags: Option<TcpFlags>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndecodableReason {
    NonIpEthertype,
    /// Headers cut short by the capture, malformed, or (with `fragment`) a
    /// non-initial IPv4/IPv6 fragment that carries no transport header.
    HeaderTruncated { fragment: bool },
    UnsupportedLinktype,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Meta(PacketMeta),
    Undecodable(UndecodableReason),
}

impl Decoded {
    pub fn meta(self) -> Option<PacketMeta> {
        match self {
            Decoded::Meta(m) => Some(m),
            Decoded::Undecodable(_) => None,
        }
    }
}

const TRUNCATED: UndecodableReason = UndecodableReason::HeaderTruncated { fragment: false };
const FRAGMENT: UndecodableReason = UndecodableReason::HeaderTruncated { fragment: true };

/// Decodes one captured frame. Never panics; anything that cannot be read
/// as an IP packet comes back as `Undecodable`.
pub fn decode(record: &PacketRecord, linktype: u32) -> Decoded {
    match decode_inner(record, linktype) {
        Ok(m) => Decoded::Meta(m),
        Err(r) => Decoded::Undecodable(r),
    }
}

fn be16(b: &[u8], at: usize) -> Result<u16, UndecodableReason> {
    b.get(at..at + 2)
        .map(|s| u16::from_be_bytes([s[0], s[1]]))
        .ok_or(TRUNCATED)
}

fn decode_inner(record: &PacketRecord, linktype: u32) -> Result<PacketMeta, UndecodableReason> {
    if linktype != LINKTYPE_ETHERNET {
        return Err(UndecodableReason::UnsupportedLinktype);
    }
    let data = &record.data;
    let mut ethertype = be16(data, 12)?;
    let mut at = 14;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        ethertype = be16(data, at + 2)?;
        at += 4;
    }
    let l3 = &data[at.min(data.len())..];
    let (src_ip, dst_ip, protocol, l4, l4_wire_len) = match ethertype {
        ETHERTYPE_IPV4 => ipv4(l3)?,
        ETHERTYPE_IPV6 => ipv6(l3)?,
        _ => return Err(UndecodableReason::NonIpEthertype),
    };
    let proto = Transport::from_protocol(protocol);
    let (src_port, dst_port, hdr_len, tcp_flags) = match proto {
        Transport::Tcp => {
            let off = *l4.get(12).ok_or(TRUNCATED)? as usize >> 4;
            let hdr = off * 4;
            if hdr < 20 || l4.len() < hdr {
                return Err(TRUNCATED);
            }
            let flags = TcpFlags::from_bits(l4[13]);
            (be16(l4, 0)?, be16(l4, 2)?, hdr, Some(flags))
        }
        Transport::Udp => {
            if l4.len() < 8 {
                return Err(TRUNCATED);
            }
            (be16(l4, 0)?, be16(l4, 2)?, 8, None)
        }
        _ => (0, 0, 0, None),
    };
    let payload = l4_wire_len.saturating_sub(hdr_len);
    Ok(PacketMeta {
        ts: record.ts,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        proto,
        payload_bytes: (payload as u32).min(record.origlen),
        tcp_flags,
    })
}

type L3<'a> = (IpAddr, IpAddr, u8, &'a [u8], usize);

/// Returns addresses, protocol, captured transport bytes and on-wire transport length.
fn ipv4(b: &[u8]) -> Result<L3<'_>, UndecodableReason> {
    let first = *b.first().ok_or(TRUNCATED)?;
    if first >> 4 != 4 {
        return Err(TRUNCATED);
    }
    let ihl = (first & 0x0f) as usize * 4;
    if ihl < 20 || b.len() < ihl {
        return Err(TRUNCATED);
    }
    let total = be16(b, 2)? as usize;
    if total < ihl {
        return Err(TRUNCATED);
    }
    let frag = be16(b, 6)? & 0x1fff;
    if frag != 0 {
        return Err(FRAGMENT);
    }
    let src = Ipv4Addr::new(b[12], b[13], b[14], b[15]);
    let dst = Ipv4Addr::new(b[16], b[17], b[18], b[19]);
    let end = total.min(b.len());
    Ok((src.into(), dst.into(), b[9], &b[ihl..end], total - ihl))
}

fn ipv6(b: &[u8]) -> Result<L3<'_>, UndecodableReason> {
    if b.len() < 40 {
        return Err(TRUNCATED);
    }
    if b[0] >> 4 != 6 {
        return Err(TRUNCATED);
    }
    let payload_len = be16(b, 4)? as usize;
    let mut next = b[6];
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&b[8..24]);
    dst.copy_from_slice(&b[24..40]);
    let mut at = 40;
    let mut consumed = 0usize;
    loop {
        match next {
            // hop-by-hop, routing, destination options
            0 | 43 | 60 => {
                let len = (*b.get(at + 1).ok_or(TRUNCATED)? as usize + 1) * 8;
                next = b[at];
                at += len;
                consumed += len;
            }
            44 => {
                let frag = be16(b, at + 2)? >> 3;
                if frag != 0 {
                    return Err(FRAGMENT);
                }
                next = b[at];
                at += 8;
                consumed += 8;
            }
            _ => break,
        }
        if at > b.len() {
            return Err(TRUNCATED);
        }
    }
    let end = (40 + payload_len).min(b.len()).max(at);
    Ok((
        Ipv6Addr::from(src).into(),
        Ipv6Addr::from(dst).into(),
        next,
        &b[at..end],
        payload_len.saturating_sub(consumed),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::packet::{build_frame, FrameSpec};

    fn tcp_syn() -> FrameSpec {
        FrameSpec {
            src_ip: "10.0.0.1".parse().unwrap(),
            dst_ip: "10.0.0.2".parse().unwrap(),
            src_port: 40000,
            dst_port: 80,
            proto: Transport::Tcp,
            tcp_flags: TcpFlags::SYN,
            payload_len: 0,
            vlan: None,
        }
    }

    #[test]
    fn minimal_tcp_syn() {
        let frame = build_frame(&tcp_syn());
        let rec = PacketRecord::new(7, frame);
        let m = decode(&rec, 1).meta().unwrap();
        assert_eq!(m.proto, Transport::Tcp);
        assert_eq!(m.dst_port, 80);
        assert_eq!(m.src_port, 40000);
        assert_eq!(m.tcp_flags, Some(TcpFlags::SYN));
        assert_eq!(m.payload_bytes, 0);
        assert_eq!(m.ts, 7);
    }

    #[test]
    fn arp_is_not_ip() {
        let mut frame = vec![0u8; 42];
        frame[12..14].copy_from_slice(&ETHERTYPE_ARP.to_be_bytes());
        let rec = PacketRecord::new(0, frame);
        assert_eq!(
            decode(&rec, 1),
            Decoded::Undecodable(UndecodableReason::NonIpEthertype)
        );
    }

    #[test]
    fn truncated_mid_tcp_header() {
        let frame = build_frame(&tcp_syn());
        let cut = 14 + 20 + 10;
        let rec = PacketRecord {
            ts: 0,
            caplen: cut as u32,
            origlen: frame.len() as u32,
            data: frame[..cut].to_vec(),
        };
        assert_eq!(decode(&rec, 1), Decoded::Undecodable(TRUNCATED));
    }

    #[test]
    fn other_linktype() {
        let rec = PacketRecord::new(0, build_frame(&tcp_syn()));
        assert_eq!(
            decode(&rec, 101),
            Decoded::Undecodable(UndecodableReason::UnsupportedLinktype)
        );
    }

    #[test]
    fn vlan_tag_is_skipped() {
        let mut spec = tcp_syn();
        spec.vlan = Some(42);
        spec.payload_len = 11;
        let m = decode(&PacketRecord::new(0, build_frame(&spec)), 1)
            .meta()
            .unwrap();
        assert_eq!(m.dst_port, 80);
        assert_eq!(m.payload_bytes, 11);
    }

    #[test]
    fn later_fragment_is_flagged() {
        let mut frame = build_frame(&tcp_syn());
        frame[14 + 6] = 0x00;
        frame[14 + 7] = 0x10;
        let rec = PacketRecord::new(0, frame);
        assert_eq!(decode(&rec, 1), Decoded::Undecodable(FRAGMENT));
    }

    #[test]
    fn payload_counts_wire_length_when_snapped() {
        let mut spec = tcp_syn();
        spec.payload_len = 1000;
        let frame = build_frame(&spec);
        let cut = 14 + 20 + 20 + 10;
        let rec = PacketRecord {
            ts: 0,
            caplen: cut as u32,
            origlen: frame.len() as u32,
            data: frame[..cut].to_vec(),
        };
        assert_eq!(decode(&rec, 1).meta().unwrap().payload_bytes, 1000);
    }

    #[test]
    fn icmp_has_no_ports() {
        let mut spec = tcp_syn();
        spec.proto = Transport::Icmp;
        spec.payload_len = 8;
        let m = decode(&PacketRecord::new(0, build_frame(&spec)), 1)
            .meta()
            .unwrap();
        assert_eq!((m.src_port, m.dst_port), (0, 0));
        assert_eq!(m.proto, Transport::Icmp);
        assert_eq!(m.tcp_flags, None);
    }

    #[test]
    fn transport_names_round_trip() {
        for t in [
            Transport::Tcp,
            Transport::Udp,
            Transport::Icmp,
            Transport::Other(47),
        ] {
            assert_eq!(Transport::parse(&t.to_string()), Some(t));
        }
    }
}
