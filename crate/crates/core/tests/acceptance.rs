//! End-to-end acceptance checks. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits non-zero on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use netcase_core::capture::{encode_capture, read_all, read_packets, repair_bytes, CaptureHeader, PacketRecord};
use netcase_core::case::{Case, ConfigRef, Engine};
use netcase_core::decode::{decode, Transport};
use netcase_core::detect::{
    decade_bins, interval_histogram, port_scan_report, DetectionReport, DetectionThresholds,
};
use netcase_core::flow::{assemble, AssemblyConfig, FlowRecord};
use netcase_core::ingest::{ImportConfig, WatchConfig};
use netcase_core::store::{
    AggregationSpec, Bucket, Document, Metric, QueryFilter, SourceKind, Store, StoreError,
    StoreLimits, TermsAgg, Value, DOC_COUNT,
};
use netcase_core::synth::packet::{tcp_session, to_records, TimedFrame};
use netcase_core::synth::replica::{Conversation, Replica, ReplicaConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ip(s: &str) -> IpAddr {
    s.parse().unwrap()
}

fn day(d: &str) -> NaiveDate {
    d.parse().unwrap()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn flow(n: u64, orig: IpAddr, resp: IpAddr, port: u16, d: NaiveDate) -> FlowRecord {
    let ts = d.and_hms_opt(12, 0, 0).unwrap().and_utc().timestamp_micros() + n as i64;
    FlowRecord {
        flow_id: format!("{n:016x}"),
        orig_ip: orig,
        orig_port: 40000,
        resp_ip: resp,
        resp_port: port,
        proto: Transport::Tcp,
        first_ts: ts,
        last_ts: ts,
        duration: 0,
        orig_bytes: 0,
        resp_bytes: 0,
        orig_pkts: 1,
        resp_pkts: 0,
        day: d,
        orig_name: None,
        resp_name: None,
    }
}

fn store_with(dir: &Path, flows: &[FlowRecord]) -> Store {
    let store = Store::open(dir).unwrap();
    store
        .index_batch(flows.iter().map(Document::from_flow).collect())
        .unwrap();
    store
}

// ---------------------------------------------------------------- oracles

/// sender -> receiver -> distinct ports, from raw conversations.
type PairPorts = BTreeMap<IpAddr, BTreeMap<IpAddr, BTreeSet<u16>>>;
/// Senders with their totals and per-receiver unique port counts.
type ReportShape = Vec<(IpAddr, u64, Vec<(IpAddr, u64)>)>;

fn pair_ports(pairs: impl IntoIterator<Item = (IpAddr, IpAddr, u16)>) -> PairPorts {
    let mut out = PairPorts::new();
    for (s, r, p) in pairs {
        out.entry(s).or_default().entry(r).or_default().insert(p);
    }
    out
}

/// (sender, total, [(receiver, ports)]) in report order.
fn oracle_report(pairs: &PairPorts, pair_min: u64, total_min: u64) -> ReportShape {
    let mut out = Vec::new();
    for (s, rs) in pairs {
        let mut recv: Vec<(IpAddr, u64)> = rs
            .iter()
            .map(|(r, ps)| (*r, ps.len() as u64))
            .filter(|(_, n)| *n > pair_min)
            .collect();
        let total: u64 = recv.iter().map(|(_, n)| n).sum();
        if total > total_min {
            recv.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.to_string().cmp(&b.0.to_string())));
            out.push((*s, total, recv));
        }
    }
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.to_string().cmp(&b.0.to_string())));
    out
}

fn report_shape(r: &DetectionReport) -> ReportShape {
    r.entries
        .iter()
        .map(|e| {
            (
                e.sender_ip,
                e.total_count,
                e.receivers.iter().map(|x| (x.receiver_ip, x.unique_ports)).collect(),
            )
        })
        .collect()
}

fn oracle_bins(pairs: &PairPorts) -> Vec<u64> {
    let edges = [1u64, 10, 100, 1000, 10000];
    let mut bins = vec![0u64; edges.len()];
    for rs in pairs.values() {
        let total: u64 = rs.values().map(|p| p.len() as u64).sum();
        if total == 0 {
            continue;
        }
        let i = edges.iter().rposition(|&e| total >= e).unwrap();
        bins[i] += 1;
    }
    bins
}

fn conv_pairs<'a>(convs: &'a [Conversation]) -> impl Iterator<Item = (IpAddr, IpAddr, u16)> + 'a {
    convs.iter().map(|c| (c.client.0, c.server.0, c.server.1))
}

// -------------------------------------------------------------- criteria

/// The default replica, generated, written and imported once per run.
struct ReplicaRun {
    _dir: tempfile::TempDir,
    _engine: Engine,
    case: Arc<Case>,
    replica: Replica,
    /// Generation through the end of import.
    build_time: Duration,
    import_ok: Result<(), String>,
}

fn replica_run() -> &'static ReplicaRun {
    static RUN: OnceLock<ReplicaRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tmp();
        let started = Instant::now();
        let replica = Replica::generate(ReplicaConfig::default());
        let captures = replica.write(&dir.path().join("pcap")).unwrap();
        let engine = Engine::open(&dir.path().join("root")).unwrap();
        let case = engine.create_case("replica").unwrap();
        let rec = case
            .import(&captures, ConfigRef::Inline(ImportConfig::new("default")))
            .unwrap();
        let import_ok = if rec.succeeded() {
            Ok(())
        } else {
            Err(format!("import failed: {:?}", rec.status))
        };
        ReplicaRun {
            _dir: dir,
            _engine: engine,
            case,
            replica,
            build_time: started.elapsed(),
            import_ok,
        }
    })
}

fn replica_end_to_end() -> Outcome {
    let run = replica_run();
    let started = Instant::now();
    run.import_ok.clone()?;
    let (case, replica) = (&run.case, &run.replica);
    let mut lines = Vec::new();
    let scanners: Vec<IpAddr> = replica.config.scanners.iter().map(|s| s.ip).collect();
    let t = DetectionThresholds::default();
    for (d, convs) in &replica.conversations {
        let report = port_scan_report(case.store(), *d, &t, &StoreLimits::default()).unwrap();
        let got = report_shape(&report);
        let want = oracle_report(&pair_ports(conv_pairs(convs)), 10, 500);
        ensure(got == want, || format!("{d}: report differs from the brute-force oracle"))?;
        let senders: Vec<IpAddr> = got.iter().map(|e| e.0).collect();
        ensure(senders == scanners, || format!("{d}: expected exactly {scanners:?}, got {senders:?}"))?;
        lines.push(format!("{d}: {}={} {}={}", got[0].0, got[0].1, got[1].0, got[1].1));
    }
    let elapsed = run.build_time + started.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} hosts, {} packets, {}; {:.1}s",
        replica.truth.hosts.len(),
        replica.truth.packets,
        lines.join("; "),
        elapsed.as_secs_f64()
    ))
}

fn threshold_boundary() -> Outcome {
    let dir = tmp();
    let d = day("2018-02-28");
    let mut flows = Vec::new();
    let mut n = 0;
    let mut put = |sender: &str, receivers: u8, ports: u16, flows: &mut Vec<FlowRecord>| {
        for r in 0..receivers {
            for p in 1..=ports {
                n += 1;
                flows.push(flow(n, ip(sender), IpAddr::V4(Ipv4Addr::new(10, 9, 0, r)), p, d));
            }
        }
    };
    put("10.0.0.1", 50, 10, &mut flows); // 500 total, every pair exactly 10
    put("10.0.0.2", 20, 25, &mut flows); // pairs above 10, total exactly 500
    put("10.0.0.3", 1, 501, &mut flows); // one pair, total 501
    put("10.0.0.4", 46, 11, &mut flows); // 506
    let store = store_with(dir.path(), &flows);
    let r = port_scan_report(&store, d, &DetectionThresholds::default(), &StoreLimits::default()).unwrap();
    let got: Vec<(IpAddr, u64)> = r.entries.iter().map(|e| (e.sender_ip, e.total_count)).collect();
    let want = vec![(ip("10.0.0.4"), 506), (ip("10.0.0.3"), 501)];
    ensure(got == want, || format!("got {got:?}"))?;
    Ok("exactly-10 pairs and exactly-500 totals excluded".into())
}

fn max_buckets() -> Outcome {
    let dir = tmp();
    let d = day("2018-02-28");
    let flows: Vec<FlowRecord> = (0..10_001u32)
        .map(|i| {
            let s = IpAddr::V4(Ipv4Addr::from(0x0a00_0000 + i));
            flow(u64::from(i), s, ip("10.255.0.1"), 80, d)
        })
        .collect();
    let store = store_with(dir.path(), &flows);
    let spec = AggregationSpec::new("senders", TermsAgg::new("orig_ip"));
    match store.aggregate(&QueryFilter::match_all(), &spec, &StoreLimits::default()) {
        Err(StoreError::TooManyBuckets { required, limit }) => {
            ensure(required == 10_001 && limit == 10_000, || format!("{required}/{limit}"))?
        }
        other => return Err(format!("expected TooManyBuckets, got {other:?}")),
    }
    let t = DetectionThresholds::default();
    let err = port_scan_report(&store, d, &t, &StoreLimits::default()).unwrap_err();
    ensure(err.to_string().contains("max_buckets"), || format!("no remedy in `{err}`"))?;
    let raised = StoreLimits::with_max_buckets(20_000);
    let ok = store.aggregate(&QueryFilter::match_all(), &spec, &raised).unwrap();
    ensure(ok.buckets.len() == 10_001, || format!("{} buckets", ok.buckets.len()))?;
    // the report nests receivers under senders: 20,002 buckets
    let nested = StoreLimits::with_max_buckets(30_000);
    port_scan_report(&store, d, &t, &nested).map_err(|e| e.to_string())?;
    Ok("10,001 buckets: TooManyBuckets at 10,000, ok at 20,000; report ok at 30,000".into())
}

// naive aggregation, independent of the store's evaluator

#[derive(Debug, PartialEq)]
struct OBucket {
    key: Value,
    doc_count: u64,
    metrics: BTreeMap<String, u64>,
    aggs: BTreeMap<String, Vec<OBucket>>,
}

fn o_metric(b: &OBucket, name: &str) -> u64 {
    if name == DOC_COUNT {
        b.doc_count
    } else {
        b.metrics[name]
    }
}

fn naive(agg: &TermsAgg, docs: &[&Document]) -> Vec<OBucket> {
    let mut keys: Vec<&Value> = Vec::new();
    for d in docs {
        if let Some(v) = d.get(&agg.field) {
            if !keys.contains(&v) {
                keys.push(v);
            }
        }
    }
    let mut out = Vec::new();
    for key in keys {
        let members: Vec<&Document> = docs
            .iter()
            .copied()
            .filter(|d| d.get(&agg.field) == Some(key))
            .collect();
        let aggs: BTreeMap<String, Vec<OBucket>> = agg
            .aggs
            .iter()
            .map(|(n, c)| (n.clone(), naive(c, &members)))
            .collect();
        let mut metrics = BTreeMap::new();
        for (name, m) in &agg.metrics {
            let v = match m {
                Metric::UniqueCount { field } => {
                    let mut seen: Vec<&Value> = Vec::new();
                    for d in &members {
                        if let Some(v) = d.get(field) {
                            if !seen.contains(&v) {
                                seen.push(v);
                            }
                        }
                    }
                    seen.len() as u64
                }
                Metric::Sum { agg: child, metric } => {
                    aggs[child].iter().map(|b| o_metric(b, metric)).sum()
                }
            };
            metrics.insert(name.clone(), v);
        }
        let b = OBucket {
            key: key.clone(),
            doc_count: members.len() as u64,
            metrics,
            aggs,
        };
        if agg.having.iter().all(|h| o_metric(&b, &h.metric) > h.gt) {
            out.push(b);
        }
    }
    let by = agg.sort.as_ref().map_or(DOC_COUNT.to_string(), |s| s.by.clone());
    out.sort_by(|a, b| {
        o_metric(b, &by)
            .cmp(&o_metric(a, &by))
            .then_with(|| a.key.to_string().cmp(&b.key.to_string()))
    });
    let cap = [agg.size, agg.sort.as_ref().and_then(|s| s.size)]
        .into_iter()
        .flatten()
        .min();
    if let Some(c) = cap {
        out.truncate(c);
    }
    out
}

fn from_store(b: &Bucket) -> OBucket {
    OBucket {
        key: b.key.clone(),
        doc_count: b.doc_count,
        metrics: b.metrics.clone(),
        aggs: b
            .aggs
            .iter()
            .map(|(n, bs)| (n.clone(), bs.iter().map(from_store).collect()))
            .collect(),
    }
}

const FIELDS: [&str; 4] = ["h", "p", "s", "q"];

fn random_doc(rng: &mut ChaCha8Rng, n: usize) -> Document {
    let mut fields = BTreeMap::new();
    if rng.gen_bool(0.9) {
        fields.insert("h".into(), Value::Ip(IpAddr::V4(Ipv4Addr::new(10, 0, 0, rng.gen_range(0..30)))));
    }
    if rng.gen_bool(0.9) {
        fields.insert("p".into(), Value::Int(rng.gen_range(0..50)));
    }
    if rng.gen_bool(0.9) {
        fields.insert("s".into(), Value::Str(format!("user{}", rng.gen_range(0..20))));
    }
    if rng.gen_bool(0.9) {
        fields.insert("q".into(), Value::Int(rng.gen_range(0..5)));
    }
    fields.insert("n".into(), Value::Int(n as i64));
    Document {
        doc_id: format!("d{n}"),
        source_kind: SourceKind::Json,
        day: None,
        fields,
    }
}

fn random_terms(rng: &mut ChaCha8Rng, depth: usize) -> TermsAgg {
    let mut t = TermsAgg::new(FIELDS[rng.gen_range(0..FIELDS.len())]);
    let mut names = vec![DOC_COUNT.to_string()];
    if depth > 1 && rng.gen_bool(0.8) {
        let child = random_terms(rng, depth - 1);
        let child_metrics: Vec<String> = std::iter::once(DOC_COUNT.to_string())
            .chain(child.metrics.keys().cloned())
            .collect();
        let pick = child_metrics[rng.gen_range(0..child_metrics.len())].clone();
        t = t.sub("inner", child);
        if rng.gen_bool(0.7) {
            t = t.metric("total", Metric::Sum { agg: "inner".into(), metric: pick });
            names.push("total".into());
        }
    }
    if rng.gen_bool(0.7) {
        let f = FIELDS[rng.gen_range(0..FIELDS.len())];
        t = t.metric("uniq", Metric::UniqueCount { field: f.into() });
        names.push("uniq".into());
    }
    if rng.gen_bool(0.5) {
        let m = names[rng.gen_range(0..names.len())].clone();
        t = t.having(&m, rng.gen_range(0..40));
    }
    if rng.gen_bool(0.6) {
        let m = names[rng.gen_range(0..names.len())].clone();
        let size = rng.gen_bool(0.5).then(|| rng.gen_range(1..15));
        t = t.sort_desc(&m, size);
    }
    if rng.gen_bool(0.4) {
        t = t.size(rng.gen_range(1..20));
    }
    t
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20_180_228);
    let mut total_docs = 0;
    for trial in 0..20 {
        let dir = tmp();
        let n = rng.gen_range(1..=10_000);
        total_docs += n;
        let docs: Vec<Document> = (0..n).map(|i| random_doc(&mut rng, i)).collect();
        let store = Store::open(dir.path()).unwrap();
        store.index_batch(docs.clone()).unwrap();
        let depth = rng.gen_range(1..=3);
        let terms = random_terms(&mut rng, depth);
        let spec = AggregationSpec::new("a", terms.clone());
        let got = store
            .aggregate(&QueryFilter::match_all(), &spec, &StoreLimits::with_max_buckets(u64::MAX))
            .unwrap();
        let refs: Vec<&Document> = docs.iter().collect();
        let want = naive(&terms, &refs);
        let got: Vec<OBucket> = got.buckets.iter().map(from_store).collect();
        ensure(got == want, || format!("trial {trial}: mismatch for {}", serde_json::to_string(&spec).unwrap()))?;
    }
    Ok(format!("20 trials, {total_docs} docs, exact match"))
}

fn conservation() -> Outcome {
    let dir = tmp();
    let cfg = ReplicaConfig {
        workstations: 20,
        scanners: ReplicaConfig::default()
            .scanners
            .into_iter()
            .map(|mut s| {
                s.ports = 200;
                s.victims = 3;
                s
            })
            .collect(),
        rotate_packets: 3_000,
        ..ReplicaConfig::default()
    };
    let replica = Replica::generate(cfg);
    let paths = replica.write(dir.path()).unwrap();
    let (mut all_pkts, mut all_bytes) = (0u64, 0u64);
    for p in &paths {
        let (h, recs) = read_all(p).unwrap();
        let metas: Vec<_> = recs.iter().filter_map(|r| decode(r, h.linktype).meta()).collect();
        let flows = assemble(&metas, AssemblyConfig::default()).unwrap();
        let fp: u64 = flows.iter().map(|f| f.orig_pkts + f.resp_pkts).sum();
        let fb: u64 = flows.iter().map(|f| f.orig_bytes + f.resp_bytes).sum();
        let pb: u64 = metas.iter().map(|m| u64::from(m.payload_bytes)).sum();
        ensure(fp == metas.len() as u64, || format!("{}: {fp} flow packets vs {} decoded", p.display(), metas.len()))?;
        ensure(fb == pb, || format!("{}: {fb} flow bytes vs {pb} payload", p.display()))?;
        all_pkts += fp;
        all_bytes += fb;
    }
    ensure(all_pkts == replica.truth.packets, || format!("{all_pkts} vs {}", replica.truth.packets))?;
    ensure(all_bytes == replica.truth.payload_bytes, || "payload total differs".into())?;
    // the import path conserves too
    let engine = Engine::open(&dir.path().join("root")).unwrap();
    let case = engine.create_case("c").unwrap();
    let rec = case.import(&paths, ConfigRef::Inline(ImportConfig::new("d"))).unwrap();
    let mut sp = 0;
    let mut sb = 0;
    case.store().for_each_doc(None, |d| {
        let f = d.to_flow().unwrap();
        sp += f.orig_pkts + f.resp_pkts;
        sb += f.orig_bytes + f.resp_bytes;
    });
    ensure(sp == rec.packets_read - rec.packets_undecodable, || "import packet total differs".into())?;
    ensure(sp == all_pkts && sb == all_bytes, || "import totals differ".into())?;
    Ok(format!("{} captures, {all_pkts} packets, {all_bytes} payload bytes", paths.len()))
}

fn parse_clean(bytes: &[u8]) -> Result<Vec<PacketRecord>, String> {
    read_packets(bytes)
        .map_err(|e| e.to_string())?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())
}

fn repair() -> Outcome {
    let frames = tcp_session((ip("10.0.0.1"), 40000), (ip("10.0.0.2"), 80), 1_519_776_000_000_000, 4, 300);
    let recs = to_records(&frames);
    let intact = encode_capture(CaptureHeader::ethernet(65535), &recs);
    let mut fixtures = BTreeMap::new();
    fixtures.insert("truncated-tail", intact[..intact.len() - 7].to_vec());
    fixtures.insert("truncated-header", intact[..intact.len() - recs.last().unwrap().data.len() - 9].to_vec());
    // snaplen lowered below the data packets' caplen
    let mut caplen = intact.clone();
    caplen[16..20].copy_from_slice(&100u32.to_le_bytes());
    fixtures.insert("caplen-over-snaplen", caplen);
    let mut detail = Vec::new();
    for (name, bytes) in &fixtures {
        ensure(parse_clean(bytes).is_err(), || format!("{name}: fixture is not corrupt"))?;
        let (once, outcome) = repair_bytes(bytes).map_err(|e| format!("{name}: {e}"))?;
        let back = parse_clean(&once).map_err(|e| format!("{name}: repaired file fails: {e}"))?;
        let (twice, _) = repair_bytes(&once).unwrap();
        ensure(twice == once, || format!("{name}: second pass differs"))?;
        detail.push(format!("{name} {} fixes/{} records", outcome.fixes.len(), back.len()));
    }
    Ok(detail.join(", "))
}

fn import_flows(case: &Case, inputs: &[PathBuf]) -> Vec<serde_json::Value> {
    let rec = case.import(inputs, ConfigRef::Inline(ImportConfig::new("d"))).unwrap();
    assert!(rec.succeeded(), "{rec:?}");
    case.store()
        .query(&QueryFilter::match_all(), usize::MAX, 0)
        .unwrap()
        .iter()
        .map(Document::to_plain_json)
        .collect()
}

fn write_frames(path: &Path, frames: &[TimedFrame]) {
    netcase_core::capture::write_capture(path, CaptureHeader::ethernet(65535), &to_records(frames)).unwrap();
}

fn split_capture() -> Outcome {
    let dir = tmp();
    let frames = tcp_session((ip("10.0.0.1"), 40000), (ip("10.0.0.2"), 443), 1_519_776_000_000_000, 6, 500);
    let whole = dir.path().join("whole.pcap");
    write_frames(&whole, &frames);
    let cuts = [0, 4, 11, frames.len()];
    let parts: Vec<PathBuf> = (0..3)
        .map(|i| {
            let p = dir.path().join(format!("part{i}.pcap"));
            write_frames(&p, &frames[cuts[i]..cuts[i + 1]]);
            p
        })
        .collect();
    let engine = Engine::open(&dir.path().join("root")).unwrap();
    let a = import_flows(&engine.create_case("whole").unwrap(), &[whole]);
    let shuffled = vec![parts[2].clone(), parts[0].clone(), parts[1].clone()];
    let b = import_flows(&engine.create_case("split").unwrap(), &shuffled);
    ensure(a.len() == 1, || format!("{} flows from the whole capture", a.len()))?;
    ensure(a == b, || "split import differs".into())?;
    Ok(format!("1 flow, {} packets, identical", frames.len()))
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

fn battery(case: &Case) -> Vec<serde_json::Value> {
    let s = case.store();
    let q = |f: QueryFilter| -> serde_json::Value {
        let docs = s.query(&f, usize::MAX, 0).unwrap();
        serde_json::Value::Array(docs.iter().map(Document::to_plain_json).collect())
    };
    let agg = |t: TermsAgg| s.aggregate(&QueryFilter::match_all(), &AggregationSpec::new("a", t), &StoreLimits::default()).unwrap().to_json();
    let t = DetectionThresholds::default();
    let lim = StoreLimits::default();
    let day1 = day("2018-02-28");
    vec![
        q(QueryFilter::match_all()),
        q(QueryFilter::match_all().term("day", "2018-02-28")),
        q(QueryFilter::match_all().term("resp_port", 445i64)),
        q(QueryFilter::match_all().range("resp_port", Some(1i64), Some(100i64))),
        serde_json::json!(s.count(&QueryFilter::match_all().exists("flow_id")).unwrap()),
        agg(TermsAgg::new("orig_ip")),
        agg(TermsAgg::new("resp_port").size(5)),
        agg(TermsAgg::new("orig_ip").sub("r", TermsAgg::new("resp_ip").metric("u", Metric::UniqueCount { field: "resp_port".into() }))),
        port_scan_report(s, day1, &t, &lim).unwrap().to_json(),
        serde_json::to_value(interval_histogram(s, day1, &t, &lim).unwrap()).unwrap(),
    ]
}

fn small_replica(seed: u64) -> ReplicaConfig {
    ReplicaConfig {
        seed,
        workstations: 15,
        sessions: (3, 6),
        days: vec![day("2018-02-28")],
        scanners: ReplicaConfig::default()
            .scanners
            .into_iter()
            .map(|mut s| {
                s.ports = 60;
                s.victims = 2;
                s
            })
            .collect(),
        rotate_packets: 2_000,
    }
}

fn backup_restore_isolation() -> Outcome {
    let dir = tmp();
    let engine = Engine::open(&dir.path().join("root")).unwrap();
    let populate = |id: &str, seed: u64| {
        let case = engine.create_case(id).unwrap();
        let r = Replica::generate(small_replica(seed));
        let paths = r.write(&case.root().join("data")).unwrap();
        let rec = case.import(&paths, ConfigRef::Inline(ImportConfig::new("d"))).unwrap();
        assert!(rec.succeeded());
        case
    };
    let a = populate("alpha", 1);
    let b = populate("bravo", 2);
    let before_a = battery(&a);
    let out = dir.path().join("alpha.tar.gz");
    a.backup(&out).unwrap();
    let restored = engine.restore_case(&out, "alpha-copy").unwrap();
    ensure(battery(&restored) == before_a, || "restored case answers differently".into())?;
    let reopened = Engine::open(engine.data_root()).unwrap();
    ensure(battery(&reopened.case("alpha-copy").unwrap()) == before_a, || "restored case differs after reopen".into())?;
    let b_before = battery(&b);
    let b_files = snapshot(b.root());
    engine.destroy_case("alpha").unwrap();
    ensure(snapshot(b.root()) == b_files, || "bravo's files changed".into())?;
    ensure(battery(&b) == b_before, || "bravo's answers changed".into())?;
    let fresh = Engine::open(engine.data_root()).unwrap();
    ensure(battery(&fresh.case("bravo").unwrap()) == b_before, || "bravo differs after reopen".into())?;
    Ok(format!("{} battery items identical, destroy left other case bit-identical", before_a.len()))
}

fn watchdog() -> Outcome {
    let dir = tmp();
    let engine = Engine::open(&dir.path().join("root")).unwrap();
    let case = engine.create_case("w").unwrap();
    case.save_config(ImportConfig::new("d")).unwrap();
    let drop = case.root().join("data/drop");
    std::fs::create_dir_all(&drop).unwrap();
    case.put_watch(WatchConfig::new("w", "drop", "d")).unwrap();
    let t0 = 1_519_776_000_000_000;
    write_frames(&drop.join("one.pcap"), &tcp_session((ip("10.0.0.1"), 40000), (ip("10.0.0.2"), 80), t0, 2, 10));
    let mut per_tick = Vec::new();
    for _ in 0..5 {
        per_tick.push(case.tick_watch("w").unwrap().len());
    }
    ensure(per_tick.iter().sum::<usize>() == 1, || format!("imports per tick {per_tick:?}"))?;
    // a file that keeps growing between ticks is left alone
    let frames = tcp_session((ip("10.0.0.3"), 40000), (ip("10.0.0.4"), 22), t0, 20, 10);
    let recs = to_records(&frames);
    let grow = drop.join("grow.pcap");
    let mut deferred = 0;
    for k in 1..=4 {
        std::fs::write(&grow, encode_capture(CaptureHeader::ethernet(65535), &recs[..k * 10])).unwrap();
        deferred += 1;
        ensure(case.tick_watch("w").unwrap().is_empty(), || format!("imported while growing (step {k})"))?;
    }
    std::fs::write(&grow, encode_capture(CaptureHeader::ethernet(65535), &recs)).unwrap();
    let first = case.tick_watch("w").unwrap().len();
    let second = case.tick_watch("w").unwrap().len();
    let third = case.tick_watch("w").unwrap().len();
    ensure((first, second, third) == (0, 1, 0), || format!("stable file ticks {:?}", (first, second, third)))?;
    let flows = case.store().query(&QueryFilter::match_all().term("resp_port", 22i64), 10, 0).unwrap();
    let f = flows.first().and_then(Document::to_flow).ok_or("grown file not indexed")?;
    ensure(f.orig_pkts + f.resp_pkts == frames.len() as u64, || "grown file imported partially".into())?;
    Ok(format!("ticks {per_tick:?}; growing file deferred {deferred} ticks, then imported whole"))
}

fn histogram() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = day("2018-02-28");
    let t = DetectionThresholds::default();
    let lim = StoreLimits::with_max_buckets(1_000_000);
    let mut top_bin_hits = 0;
    let mut fixture_flows = 0;
    for trial in 0..10 {
        let dir = tmp();
        let mut flows = Vec::new();
        let mut pairs = Vec::new();
        let senders = rng.gen_range(1..25);
        for s in 0..senders {
            let sender = IpAddr::V4(Ipv4Addr::new(10, 1, 0, s));
            let receivers = if s == 0 { 1 } else { rng.gen_range(1..4) };
            let width = [3u16, 30, 300, 4000][rng.gen_range(0..4)];
            let sweep = (s == 0 && trial % 2 == 0).then(|| rng.gen_range(9_990..12_000u16));
            for r in 0..receivers {
                let recv = IpAddr::V4(Ipv4Addr::new(10, 2, 0, r));
                let ports: Vec<u16> = match sweep {
                    Some(n) => (1..=n).collect(),
                    None => (0..rng.gen_range(1..=width)).map(|_| rng.gen_range(1..=width)).collect(),
                };
                for p in ports {
                    flows.push(flow(flows.len() as u64, sender, recv, p, d));
                    pairs.push((sender, recv, p));
                }
            }
        }
        let store = store_with(dir.path(), &flows);
        let h = interval_histogram(&store, d, &t, &lim).unwrap();
        let got: Vec<u64> = h.bins.iter().map(|b| b.sender_count).collect();
        let want = oracle_bins(&pair_ports(pairs));
        ensure(got == want, || format!("trial {trial}: {got:?} vs {want:?}"))?;
        top_bin_hits += want[4];
        fixture_flows += flows.len();
    }
    ensure(decade_bins().len() == 5, || "bin layout".into())?;
    ensure(top_bin_hits > 0, || "no fixture reached the top bin".into())?;
    let run = replica_run();
    run.import_ok.clone()?;
    let (case, replica) = (&run.case, &run.replica);
    let mut shapes = Vec::new();
    for (d, convs) in &replica.conversations {
        let h = interval_histogram(case.store(), *d, &t, &StoreLimits::default()).unwrap();
        let got: Vec<u64> = h.bins.iter().map(|b| b.sender_count).collect();
        ensure(got == oracle_bins(&pair_ports(conv_pairs(convs))), || format!("{d}: replica bins differ from oracle"))?;
        let total: u64 = got.iter().sum();
        ensure(got[0] + got[1] > total / 2, || format!("{d}: most senders not at <= 100 ports: {got:?}"))?;
        ensure(got[4] == 2 && got[3] == 0, || format!("{d}: scanners not isolated in the top bin: {got:?}"))?;
        shapes.push(format!("{d} {got:?}"));
    }
    Ok(format!("10 fixtures ({fixture_flows} flows) match oracle; replica {}", shapes.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("replica-end-to-end", replica_end_to_end),
        ("threshold-boundary", threshold_boundary),
        ("max-buckets", max_buckets),
        ("aggregation-oracle", aggregation_oracle),
        ("conservation", conservation),
        ("repair", repair),
        ("split-capture", split_capture),
        ("backup-restore-isolation", backup_restore_isolation),
        ("watchdog", watchdog),
        ("histogram", histogram),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
