#![allow(dead_code)]

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use netcase_core::capture::{encode_capture, CaptureHeader};
use netcase_core::decode::TcpFlags;
use netcase_core::synth::packet::{tcp_session, to_records, FrameSpec, TimedFrame};
use netcase_service::api::{ServeConfig, Server};

pub const T0: i64 = 1_519_776_000_000_000; // 2018-02-28T00:00:00Z
pub const DAY: &str = "2018-02-28";
pub const SCANNER: &str = "10.9.9.9";
pub const VICTIMS: [&str; 2] = ["10.0.0.20", "10.0.0.21"];
pub const PORTS_PER_VICTIM: u16 = 300;

fn ip(s: &str) -> IpAddr {
    s.parse().unwrap()
}

/// One scanner probing `PORTS_PER_VICTIM` ports on each victim, plus a few
/// benign sessions.
pub fn scan_frames() -> Vec<TimedFrame> {
    let mut out = Vec::new();
    let mut t = T0 + 3_600_000_000;
    for v in VICTIMS {
        for p in 0..PORTS_PER_VICTIM {
            let c = (ip(SCANNER), 50000 + p);
            let s = (ip(v), 1 + p);
            out.push((t, FrameSpec::tcp(c, s, TcpFlags::SYN, 0)));
            out.push((t + 100, FrameSpec::tcp(s, c, TcpFlags::RST | TcpFlags::ACK, 0)));
            t += 500;
        }
    }
    for k in 0..5u16 {
        out.extend(tcp_session(
            (ip("10.0.0.30"), 40000 + k),
            (ip("10.0.0.2"), 443),
            T0 + 7_200_000_000 + i64::from(k) * 1_000_000,
            2,
            120,
        ));
    }
    out.sort_by_key(|f| f.0);
    out
}

pub fn scan_pcap() -> Vec<u8> {
    encode_capture(CaptureHeader::ethernet(65535), &to_records(&scan_frames()))
}

pub fn write_scan_pcap(path: &Path) -> PathBuf {
    std::fs::write(path, scan_pcap()).unwrap();
    path.to_path_buf()
}

/// A server on an ephemeral port, shut down on drop.
pub struct TestServer {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(data_root: &Path) -> TestServer {
        Self::start_on(data_root, 0)
    }

    pub fn start_on(data_root: &Path, port: u16) -> TestServer {
        let config = ServeConfig {
            bind: ip("127.0.0.1"),
            port,
            data_root: data_root.to_path_buf(),
        };
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let server = Server::bind(&config).await.unwrap();
                addr_tx.send(server.local_addr().unwrap()).unwrap();
                server
                    .run(async {
                        let _ = stop_rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().expect("server started");
        TestServer {
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Stops accepting requests and waits for in-flight imports.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}
