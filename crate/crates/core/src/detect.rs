//! Insider port-scan analytics over indexed flows.
//!
//! The main metric is the number of distinct destination ports each sender
//! (`orig_ip`) used against each receiver (`resp_ip`) within one UTC day.
//! Pairs at or below `pair_min_unique_ports` are discarded, the surviving
//! pair counts are summed into the sender's `total_count`, senders at or
//! below `sender_min_total` are discarded, and the rest are ranked by
//! `total_count`, largest first. Both cutoffs are strict.

use std::collections::{BTreeMap, HashSet};
use std::net::IpAddr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{
    AggregationResult, AggregationSpec, Bucket, Metric, QueryFilter, SourceKind, Store,
    StoreError, StoreLimits, TermsAgg, Value,
};

pub const SENDERS: &str = "senders";
pub const RECEIVERS: &str = "receivers";
pub const UNIQUE_PORTS: &str = "unique_ports";
pub const TOTAL_COUNT: &str = "total_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionThresholds {
    pub pair_min_unique_ports: u64,
    pub sender_min_total: u64,
    pub pair_floor_for_histogram: u64,
}

impl Default for DetectionThresholds {
    fn default() -> Self {
        DetectionThresholds {
            pair_min_unique_ports: 10,
            sender_min_total: 500,
            pair_floor_for_histogram: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiverEntry {
    pub receiver_ip: IpAddr,
    pub unique_ports: u64,
    pub flows: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenderEntry {
    pub sender_ip: IpAddr,
    pub total_count: u64,
    pub flows: u64,
    pub receivers: Vec<ReceiverEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub day: NaiveDate,
    pub thresholds: DetectionThresholds,
    pub entries: Vec<SenderEntry>,
}

impl DetectionReport {
    /// Nested bucket form: each sender bucket carries `total_count` and a
    /// `receivers` bucket list whose entries carry `unique_ports`, each metric
    /// as `{"value": n}`.
    pub fn to_json(&self) -> serde_json::Value {
        let senders: Vec<_> = self
            .entries
            .iter()
            .map(|s| {
                let receivers: Vec<_> = s
                    .receivers
                    .iter()
                    .map(|r| {
                        json!({
                            "key": r.receiver_ip.to_string(),
                            "doc_count": r.flows,
                            UNIQUE_PORTS: { "value": r.unique_ports },
                        })
                    })
                    .collect();
                json!({
                    "key": s.sender_ip.to_string(),
                    "doc_count": s.flows,
                    TOTAL_COUNT: { "value": s.total_count },
                    RECEIVERS: { "buckets": receivers },
                })
            })
            .collect();
        json!({
            "day": self.day,
            "thresholds": self.thresholds,
            SENDERS: { "buckets": senders },
        })
    }

    /// `sender,receiver,unique_ports` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sender", "receiver", "unique_ports"])
            .expect("in-memory csv");
        for s in &self.entries {
            for r in &s.receivers {
                w.write_record([
                    s.sender_ip.to_string(),
                    r.receiver_ip.to_string(),
                    r.unique_ports.to_string(),
                ])
                .expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }
}

impl Serialize for DetectionReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// The per-day sender → receiver → unique destination port aggregation.
pub fn port_scan_spec(pair_min: Option<u64>, sender_min: Option<u64>) -> AggregationSpec {
    let mut receivers = TermsAgg::new("resp_ip")
        .metric(
            UNIQUE_PORTS,
            Metric::UniqueCount {
                field: "resp_port".into(),
            },
        )
        .sort_desc(UNIQUE_PORTS, None);
    if let Some(p) = pair_min {
        receivers = receivers.having(UNIQUE_PORTS, p);
    }
    let mut senders = TermsAgg::new("orig_ip")
        .metric(
            TOTAL_COUNT,
            Metric::Sum {
                agg: RECEIVERS.into(),
                metric: UNIQUE_PORTS.into(),
            },
        )
        .sort_desc(TOTAL_COUNT, None)
        .sub(RECEIVERS, receivers);
    if let Some(s) = sender_min {
        senders = senders.having(TOTAL_COUNT, s);
    }
    AggregationSpec::new(SENDERS, senders)
}

pub fn day_filter(day: NaiveDate) -> QueryFilter {
    QueryFilter::match_all()
        .term("day", day.to_string())
        .exists("flow_id")
}

fn ip_key(v: &Value) -> Option<IpAddr> {
    match v {
        Value::Ip(ip) => Some(*ip),
        _ => None,
    }
}

fn entries_from(result: &AggregationResult) -> Vec<SenderEntry> {
    let metric = |b: &Bucket, m: &str| b.metric(m).unwrap_or(0);
    result
        .buckets
        .iter()
        .filter_map(|s| {
            Some(SenderEntry {
                sender_ip: ip_key(&s.key)?,
                total_count: metric(s, TOTAL_COUNT),
                flows: s.doc_count,
                receivers: s.aggs[RECEIVERS]
                    .iter()
                    .filter_map(|r| {
                        Some(ReceiverEntry {
                            receiver_ip: ip_key(&r.key)?,
                            unique_ports: metric(r, UNIQUE_PORTS),
                            flows: r.doc_count,
                        })
                    })
                    .collect(),
            })
        })
        .collect()
}

pub fn port_scan_report(
    store: &Store,
    day: NaiveDate,
    thresholds: &DetectionThresholds,
    limits: &StoreLimits,
) -> Result<DetectionReport, StoreError> {
    let spec = port_scan_spec(
        Some(thresholds.pair_min_unique_ports),
        Some(thresholds.sender_min_total),
    );
    let result = store.aggregate(&day_filter(day), &spec, limits)?;
    Ok(DetectionReport {
        day,
        thresholds: *thresholds,
        entries: entries_from(&result),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: u64,
    /// Exclusive; `None` is unbounded.
    pub hi: Option<u64>,
    pub sender_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalHistogram {
    pub day: NaiveDate,
    pub bins: Vec<HistogramBin>,
}

/// Decade bins `[1,10) [10,100) [100,1000) [1000,10000) [10000,∞)`.
pub fn decade_bins() -> Vec<HistogramBin> {
    let mut bins: Vec<HistogramBin> = (0..4)
        .map(|e| HistogramBin {
            lo: 10u64.pow(e),
            hi: Some(10u64.pow(e + 1)),
            sender_count: 0,
        })
        .collect();
    bins.push(HistogramBin {
        lo: 10_000,
        hi: None,
        sender_count: 0,
    });
    bins
}

impl IntervalHistogram {
    pub fn empty(day: NaiveDate) -> Self {
        IntervalHistogram {
            day,
            bins: decade_bins(),
        }
    }

    /// Counts `total` in its bin; totals below 1 are ignored.
    pub fn add(&mut self, total: u64) {
        if let Some(bin) = self
            .bins
            .iter_mut()
            .find(|b| total >= b.lo && b.hi.is_none_or(|hi| total < hi))
        {
            bin.sender_count += 1;
        }
    }

    pub fn total_senders(&self) -> u64 {
        self.bins.iter().map(|b| b.sender_count).sum()
    }
}

/// Senders binned by their per-day total over pairs with at least
/// `pair_floor_for_histogram` unique ports; no sender cutoff applies.
pub fn interval_histogram(
    store: &Store,
    day: NaiveDate,
    thresholds: &DetectionThresholds,
    limits: &StoreLimits,
) -> Result<IntervalHistogram, StoreError> {
    let floor = thresholds.pair_floor_for_histogram;
    let spec = port_scan_spec(floor.checked_sub(1), None);
    let result = store.aggregate(&day_filter(day), &spec, limits)?;
    let mut hist = IntervalHistogram::empty(day);
    for s in entries_from(&result) {
        hist.add(s.total_count);
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySummary {
    pub day: NaiveDate,
    pub flows: u64,
    /// Distinct originator or responder addresses.
    pub distinct_ips: u64,
    /// Distinct originator or responder ports.
    pub distinct_ports: u64,
}

/// Exact per-day flow, address and port counts, ordered by day.
pub fn daily_summary(store: &Store) -> Vec<DaySummary> {
    #[derive(Default)]
    struct Acc {
        flows: u64,
        ips: HashSet<IpAddr>,
        ports: HashSet<i64>,
    }
    let mut days: BTreeMap<NaiveDate, Acc> = BTreeMap::new();
    store.for_each_doc(None, |doc| {
        if doc.source_kind != SourceKind::Flow {
            return;
        }
        let Some(day) = doc.day else { return };
        let acc = days.entry(day).or_default();
        acc.flows += 1;
        for f in ["orig_ip", "resp_ip"] {
            if let Some(Value::Ip(ip)) = doc.get(f) {
                acc.ips.insert(*ip);
            }
        }
        for f in ["orig_port", "resp_port"] {
            if let Some(Value::Int(p)) = doc.get(f) {
                acc.ports.insert(*p);
            }
        }
    });
    days.into_iter()
        .map(|(day, a)| DaySummary {
            day,
            flows: a.flows,
            distinct_ips: a.ips.len() as u64,
            distinct_ports: a.ports.len() as u64,
        })
        .collect()
}
