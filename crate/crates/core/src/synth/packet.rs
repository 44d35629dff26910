//! Frame construction for synthetic captures.

use std::net::IpAddr;

use crate::capture::{Micros, PacketRecord};

use crate::decode::{
    PacketMeta, TcpFlags, Transport, ETHERTYPE_IPV4, ETHERTYPE_IPV6, ETHERTYPE_VLAN, IPPROTO_ICMP,
    IPPROTO_ICMPV6, IPPROTO_TCP, IPPROTO_UDP,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSpec {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Transport,
    pub tcp_flags: TcpFlags,
    pub payload_len: u16,
    pub vlan: Option<u16>,
}

impl FrameSpec {
    pub fn tcp(src: (IpAddr, u16), dst: (IpAddr, u16), flags: TcpFlags, payload_len: u16) -> Self {
        FrameSpec {
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            proto: Transport::Tcp,
            tcp_flags: flags,
            payload_len,
            vlan: None,
        }
    }

    pub fn udp(src: (IpAddr, u16), dst: (IpAddr, u16), payload_len: u16) -> Self {
        FrameSpec {
            proto: Transport::Udp,
            tcp_flags: TcpFlags::empty(),
            ..FrameSpec::tcp(src, dst, TcpFlags::empty(), payload_len)
        }
    }

    /// The spec that encodes `meta`; both addresses must share a family.
    pub fn from_meta(meta: &PacketMeta) -> Self {
        FrameSpec {
            src_ip: meta.src_ip,
            dst_ip: meta.dst_ip,
            src_port: meta.src_port,
            dst_port: meta.dst_port,
            proto: meta.proto,
            tcp_flags: meta.tcp_flags.unwrap_or_default(),
            payload_len: meta.payload_bytes as u16,
            vlan: None,
        }
    }

    /// What decoding the built frame should produce.
    pub fn expected_meta(&self, ts: i64) -> PacketMeta {
        let ports = self.proto.has_ports();
        PacketMeta {
            ts,
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
            src_port: if ports { self.src_port } else { 0 },
            dst_port: if ports { self.dst_port } else { 0 },
            proto: self.proto,
            payload_bytes: self.payload_len as u32,
            tcp_flags: (self.proto == Transport::Tcp).then_some(self.tcp_flags),
        }
    }
}

fn protocol_number(proto: Transport, v6: bool) -> u8 {
    match proto {
        Transport::Tcp => IPPROTO_TCP,
        Transport::Udp => IPPROTO_UDP,
        Transport::Icmp if v6 => IPPROTO_ICMPV6,
        Transport::Icmp => IPPROTO_ICMP,
        Transport::Other(p) => p,
    }
}

/// Builds an Ethernet frame. Payload bytes are zero; checksums are left zero.
pub fn build_frame(spec: &FrameSpec) -> Vec<u8> {
    let v6 = spec.src_ip.is_ipv6();
    let mut l4 = Vec::with_capacity(20 + spec.payload_len as usize);
    match spec.proto {
        Transport::Tcp => {
            l4.extend_from_slice(&spec.src_port.to_be_bytes());
            l4.extend_from_slice(&spec.dst_port.to_be_bytes());
            l4.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0]); // seq, ack
            l4.push(5 << 4);
            l4.push(spec.tcp_flags.bits());
            l4.extend_from_slice(&[0xff, 0xff, 0, 0, 0, 0]); // window, csum, urg
        }
        Transport::Udp => {
            l4.extend_from_slice(&spec.src_port.to_be_bytes());
            l4.extend_from_slice(&spec.dst_port.to_be_bytes());
            l4.extend_from_slice(&(8 + spec.payload_len).to_be_bytes());
            l4.extend_from_slice(&[0, 0]);
        }
        _ => {}
    }
    l4.resize(l4.len() + spec.payload_len as usize, 0);

    let mut frame = Vec::with_capacity(18 + 40 + l4.len());
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
    if let Some(vid) = spec.vlan {
        frame.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        frame.extend_from_slice(&(vid & 0x0fff).to_be_bytes());
    }
    let proto = protocol_number(spec.proto, v6);
    match (spec.src_ip, spec.dst_ip) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            let total = (20 + l4.len()) as u16;
            frame.extend_from_slice(&[0x45, 0]);
            frame.extend_from_slice(&total.to_be_bytes());
            frame.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0]);
            frame.extend_from_slice(&s.octets());
            frame.extend_from_slice(&d.octets());
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
            frame.extend_from_slice(&[0x60, 0, 0, 0]);
            frame.extend_from_slice(&(l4.len() as u16).to_be_bytes());
            frame.extend_from_slice(&[proto, 64]);
            frame.extend_from_slice(&s.octets());
            frame.extend_from_slice(&d.octets());
        }
        _ => panic!("mixed address families in frame spec"),
    }
    frame.extend_from_slice(&l4);
    frame
}

/// A timestamped frame.
pub type TimedFrame = (Micros, FrameSpec);

/// A full TCP exchange, one packet per millisecond: three-way handshake,
/// `exchanges` request/response pairs of `payload` bytes each way, then
/// FIN/ACK from both ends.
pub fn tcp_session(
    client: (IpAddr, u16),
    server: (IpAddr, u16),
    start: Micros,
    exchanges: usize,
    payload: u16,
) -> Vec<TimedFrame> {
    let (syn, ack, fin) = (TcpFlags::SYN, TcpFlags::ACK, TcpFlags::FIN);
    let mut out = vec![
        FrameSpec::tcp(client, server, syn, 0),
        FrameSpec::tcp(server, client, syn | ack, 0),
        FrameSpec::tcp(client, server, ack, 0),
    ];
    for _ in 0..exchanges {
        out.push(FrameSpec::tcp(client, server, ack, payload));
        out.push(FrameSpec::tcp(server, client, ack, payload));
    }
    out.push(FrameSpec::tcp(client, server, fin | ack, 0));
    out.push(FrameSpec::tcp(server, client, fin | ack, 0));
    out.push(FrameSpec::tcp(client, server, ack, 0));
    out.into_iter()
        .enumerate()
        .map(|(i, f)| (start + 1000 * i as Micros, f))
        .collect()
}

pub fn to_records(frames: &[TimedFrame]) -> Vec<PacketRecord> {
    frames
        .iter()
        .map(|(ts, f)| PacketRecord::new(*ts, build_frame(f)))
        .collect()
}
