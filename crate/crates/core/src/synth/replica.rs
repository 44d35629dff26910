//! A two-day office network with two insiders port scanning colleagues.
//!
//! Workstations talk to a handful of servers on their service ports (at
//! most eight per server), resolve names over UDP and get polled by a
//! monitoring host. The scanners sweep a contiguous port range on each of
//! their victims every day. Everything is derived from one seed.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packet::{build_frame, tcp_session, FrameSpec, TimedFrame};
use crate::capture::{CaptureHeader, Micros, PacketRecord, PcapWriter};
use crate::decode::TcpFlags;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScannerSpec {
    pub ip: IpAddr,
    pub victims: usize,
    /// Ports 1..=ports are probed on every victim.
    pub ports: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub seed: u64,
    pub days: Vec<NaiveDate>,
    pub workstations: usize,
    /// Sessions per workstation per day, inclusive range.
    pub sessions: (u32, u32),
    pub scanners: Vec<ScannerSpec>,
    /// Packets per capture file before rotating to the next.
    pub rotate_packets: usize,
}

pub const SCANNER_A: Ipv4Addr = Ipv4Addr::new(172, 31, 69, 24);
pub const SCANNER_B: Ipv4Addr = Ipv4Addr::new(172, 31, 69, 13);

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            seed: 2018,
            days: vec![
                NaiveDate::from_ymd_opt(2018, 2, 28).expect("valid date"),
                NaiveDate::from_ymd_opt(2018, 3, 1).expect("valid date"),
            ],
            workstations: 60,
            sessions: (15, 40),
            scanners: vec![
                ScannerSpec {
                    ip: SCANNER_A.into(),
                    victims: 11,
                    ports: 1100,
                },
                ScannerSpec {
                    ip: SCANNER_B.into(),
                    victims: 10,
                    ports: 1040,
                },
            ],
            rotate_packets: 40_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    /// Full TCP session with request/response exchanges.
    Session { exchanges: u8, payload: u16 },
    /// UDP request and reply.
    Datagram { request: u16, reply: u16 },
    /// SYN probe; an open port answers SYN/ACK and gets reset, a closed
    /// one answers RST/ACK.
    Probe { open: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub start: Micros,
    pub client: (IpAddr, u16),
    pub server: (IpAddr, u16),
    pub shape: Shape,
}

impl Conversation {
    pub fn frames(&self) -> Vec<TimedFrame> {
        let (c, s) = (self.client, self.server);
        match self.shape {
            Shape::Session { exchanges, payload } => {
                tcp_session(c, s, self.start, exchanges as usize, payload)
            }
            Shape::Datagram { request, reply } => vec![
                (self.start, FrameSpec::udp(c, s, request)),
                (self.start + 400, FrameSpec::udp(s, c, reply)),
            ],
            Shape::Probe { open: false } => vec![
                (self.start, FrameSpec::tcp(c, s, TcpFlags::SYN, 0)),
                (self.start + 150, FrameSpec::tcp(s, c, TcpFlags::RST | TcpFlags::ACK, 0)),
            ],
            Shape::Probe { open: true } => vec![
                (self.start, FrameSpec::tcp(c, s, TcpFlags::SYN, 0)),
                (self.start + 150, FrameSpec::tcp(s, c, TcpFlags::SYN | TcpFlags::ACK, 0)),
                (self.start + 300, FrameSpec::tcp(c, s, TcpFlags::RST, 0)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanTruth {
    pub day: NaiveDate,
    pub scanner: IpAddr,
    pub victims: Vec<IpAddr>,
    pub ports_per_victim: u16,
    pub total_unique_ports: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub days: Vec<NaiveDate>,
    pub hosts: Vec<IpAddr>,
    pub scans: Vec<ScanTruth>,
    pub conversations: usize,
    pub packets: u64,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Replica {
    pub config: ReplicaConfig,
    /// Per day, in start order.
    pub conversations: Vec<(NaiveDate, Vec<Conversation>)>,
    pub truth: GroundTruth,
}

fn v4(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(a, b, c, d))
}

struct Server {
    ip: IpAddr,
    tcp: &'static [u16],
    udp: &'static [u16],
}

fn servers() -> Vec<Server> {
    vec![
        Server {
            ip: v4(172, 31, 0, 2),
            tcp: &[53],
            udp: &[53],
        },
        Server {
            ip: v4(172, 31, 0, 10),
            tcp: &[80, 443, 8080],
            udp: &[],
        },
        Server {
            ip: v4(172, 31, 0, 11),
            tcp: &[139, 445],
            udp: &[137, 138],
        },
        Server {
            ip: v4(172, 31, 0, 12),
            tcp: &[25, 110, 143, 465, 587, 993, 995],
            udp: &[],
        },
        Server {
            ip: v4(172, 31, 0, 13),
            tcp: &[88, 389, 636, 3268],
            udp: &[88, 123, 389],
        },
        Server {
            ip: v4(172, 31, 0, 14),
            tcp: &[22, 3306, 5432],
            udp: &[],
        },
        Server {
            ip: v4(52, 84, 12, 7),
            tcp: &[80, 443],
            udp: &[],
        },
        Server {
            ip: v4(13, 32, 99, 140),
            tcp: &[443],
            udp: &[443],
        },
    ]
}

const MONITOR_PORTS: [(u16, bool); 4] = [(22, true), (161, false), (5985, true), (9100, true)];
const WORKSTATION_OPEN: [u16; 4] = [135, 139, 445, 3389];

fn at(day: NaiveDate, h: u32, m: u32) -> Micros {
    day.and_time(NaiveTime::from_hms_opt(h, m, 0).expect("valid time"))
        .and_utc()
        .timestamp_micros()
}

fn ephemeral(rng: &mut ChaCha8Rng) -> u16 {
    rng.gen_range(49152..=65535)
}

impl Replica {
    pub fn generate(config: ReplicaConfig) -> Replica {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let servers = servers();
        let workstations: Vec<IpAddr> = (0..config.workstations)
            .map(|i| v4(172, 31, 64 + (i / 200) as u8, 10 + (i % 200) as u8))
            .collect();
        let monitor = v4(172, 31, 68, 5);
        let scanners: Vec<IpAddr> = config.scanners.iter().map(|s| s.ip).collect();
        let clients: Vec<IpAddr> = workstations.iter().chain(&scanners).copied().collect();

        let mut days = Vec::new();
        let mut scans = Vec::new();
        for &day in &config.days {
            let mut convs = Vec::new();
            let (open, close) = (at(day, 8, 0), at(day, 18, 0));
            for &client in &clients {
                let n = rng.gen_range(config.sessions.0..=config.sessions.1);
                for _ in 0..n {
                    let srv = servers.choose(&mut rng).expect("servers");
                    let use_udp = !srv.udp.is_empty() && (srv.tcp.is_empty() || rng.gen_bool(0.3));
                    let start = rng.gen_range(open..close);
                    let c = (client, ephemeral(&mut rng));
                    let conv = if use_udp {
                        Conversation {
                            start,
                            client: c,
                            server: (srv.ip, *srv.udp.choose(&mut rng).expect("udp")),
                            shape: Shape::Datagram {
                                request: rng.gen_range(30..=80),
                                reply: rng.gen_range(60..=400),
                            },
                        }
                    } else {
                        Conversation {
                            start,
                            client: c,
                            server: (srv.ip, *srv.tcp.choose(&mut rng).expect("tcp")),
                            shape: Shape::Session {
                                exchanges: rng.gen_range(1..=4),
                                payload: rng.gen_range(64..=1400),
                            },
                        }
                    };
                    convs.push(conv);
                }
            }
            // nightly monitoring sweep of every workstation
            let mut t = at(day, 2, 0);
            for &ws in &workstations {
                for (port, tcp) in MONITOR_PORTS {
                    let shape = if tcp {
                        Shape::Session {
                            exchanges: 1,
                            payload: 200,
                        }
                    } else {
                        Shape::Datagram {
                            request: 50,
                            reply: 150,
                        }
                    };
                    convs.push(Conversation {
                        start: t,
                        client: (monitor, ephemeral(&mut rng)),
                        server: (ws, port),
                        shape,
                    });
                    t += 20_000;
                }
            }
            let mut scan_start = at(day, 13, 0);
            for spec in &config.scanners {
                let mut victims: Vec<IpAddr> = workstations
                    .choose_multiple(&mut rng, spec.victims)
                    .copied()
                    .collect();
                victims.sort();
                let sport = ephemeral(&mut rng);
                let mut probes: Vec<(IpAddr, u16)> = victims
                    .iter()
                    .flat_map(|&v| (1..=spec.ports).map(move |p| (v, p)))
                    .collect();
                probes.shuffle(&mut rng);
                let mut t = scan_start;
                for (victim, port) in probes {
                    convs.push(Conversation {
                        start: t,
                        client: (spec.ip, sport),
                        server: (victim, port),
                        shape: Shape::Probe {
                            open: WORKSTATION_OPEN.contains(&port),
                        },
                    });
                    t += 500;
                }
                scans.push(ScanTruth {
                    day,
                    scanner: spec.ip,
                    total_unique_ports: victims.len() as u64 * u64::from(spec.ports),
                    victims,
                    ports_per_victim: spec.ports,
                });
                scan_start += 3_600_000_000;
            }
            convs.sort_by_key(|c| c.start);
            days.push((day, convs));
        }

        let mut hosts: BTreeSet<IpAddr> = clients.iter().copied().collect();
        hosts.insert(monitor);
        hosts.extend(servers.iter().map(|s| s.ip));
        let (mut packets, mut payload_bytes, mut conversations) = (0u64, 0u64, 0usize);
        for (_, convs) in &days {
            conversations += convs.len();
            for c in convs {
                let frames = c.frames();
                packets += frames.len() as u64;
                payload_bytes += frames.iter().map(|(_, f)| u64::from(f.payload_len)).sum::<u64>();
            }
        }
        let truth = GroundTruth {
            seed: config.seed,
            days: config.days.clone(),
            hosts: hosts.into_iter().collect(),
            scans,
            conversations,
            packets,
            payload_bytes,
        };
        Replica {
            config,
            conversations: days,
            truth,
        }
    }

    /// Every frame of one day in capture order.
    pub fn day_frames(&self, day: NaiveDate) -> Vec<TimedFrame> {
        let mut frames: Vec<TimedFrame> = self
            .conversations
            .iter()
            .filter(|(d, _)| *d == day)
            .flat_map(|(_, convs)| convs.iter().flat_map(Conversation::frames))
            .collect();
        frames.sort_by_key(|f| f.0);
        frames
    }

    /// Writes rotated capture files per day plus `truth.json`, and returns
    /// the capture paths in time order.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for &day in &self.config.days {
            let frames = self.day_frames(day);
            for (n, chunk) in frames.chunks(self.config.rotate_packets.max(1)).enumerate() {
                let path = dir.join(format!("capture-{day}-{n:03}.pcap"));
                let mut w = PcapWriter::new(BufWriter::new(File::create(&path)?), CaptureHeader::ethernet(65535))?;
                for (ts, f) in chunk {
                    w.write(&PacketRecord::new(*ts, build_frame(f)))?;
                }
                io::Write::flush(&mut w.into_inner())?;
                paths.push(path);
            }
        }
        let truth = serde_json::to_vec_pretty(&self.truth).map_err(io::Error::other)?;
        std::fs::write(dir.join("truth.json"), truth)?;
        Ok(paths)
    }
}
