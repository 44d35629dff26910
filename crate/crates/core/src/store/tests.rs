use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use chrono::NaiveDate;
use proptest::prelude::*;

use super::*;

fn day(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 3, d).unwrap()
}

fn ip(s: &str) -> IpAddr {
    s.parse().unwrap()
}

fn flow_doc(n: u32, orig: &str, resp: &str, port: u16, d: NaiveDate) -> Document {
    let mut fields = BTreeMap::new();
    fields.insert("flow_id".into(), Value::Str(format!("f{n:06}")));
    fields.insert("orig_ip".into(), Value::Ip(ip(orig)));
    fields.insert("resp_ip".into(), Value::Ip(ip(resp)));
    fields.insert("orig_port".into(), Value::Int(40000 + (n % 1000) as i64));
    fields.insert("resp_port".into(), Value::Int(port as i64));
    fields.insert("proto".into(), Value::Str("tcp".into()));
    let ts = d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp_micros() + n as i64;
    fields.insert("first_ts".into(), Value::Ts(ts));
    fields.insert("day".into(), Value::Str(d.to_string()));
    Document {
        doc_id: format!("f{n:06}"),
        source_kind: SourceKind::Flow,
        day: Some(d),
        fields,
    }
}

fn open() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    (dir, store)
}

fn all(store: &Store) -> Vec<Document> {
    store.query(&QueryFilter::match_all(), usize::MAX, 0).unwrap()
}

fn pair_spec() -> AggregationSpec {
    AggregationSpec::new(
        "senders",
        TermsAgg::new("orig_ip").sub(
            "receivers",
            TermsAgg::new("resp_ip").metric(
                "ports",
                Metric::UniqueCount {
                    field: "resp_port".into(),
                },
            ),
        ),
    )
}

#[test]
fn empty_batch_indexes_nothing() {
    let (_d, store) = open();
    assert_eq!(store.index_batch(Vec::new()).unwrap(), 0);
    assert_eq!(store.doc_count(), 0);
}

#[test]
fn thousand_flows_all_visible() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..1000)
        .map(|n| flow_doc(n, "10.0.0.1", "10.0.0.2", (n % 50) as u16, day(1)))
        .collect();
    assert_eq!(store.index_batch(docs).unwrap(), 1000);
    assert_eq!(store.count(&QueryFilter::match_all()).unwrap(), 1000);
    assert_eq!(all(&store).len(), 1000);
}

#[test]
fn type_change_is_schema_conflict() {
    let (_d, store) = open();
    let mut a = Document {
        doc_id: "a".into(),
        source_kind: SourceKind::Csv,
        day: None,
        fields: BTreeMap::new(),
    };
    a.fields.insert("port".into(), Value::Int(22));
    store.index_batch(vec![a.clone()]).unwrap();
    a.doc_id = "b".into();
    a.fields.insert("port".into(), Value::Str("ssh".into()));
    let err = store.index_batch(vec![a]).unwrap_err();
    assert!(matches!(
        err,
        StoreError::SchemaConflict {
            existing: FieldType::Integer,
            found: FieldType::String,
            ..
        }
    ));
    assert_eq!(store.doc_count(), 1);
}

#[test]
fn flow_fields_typed_before_any_flow() {
    let (_d, store) = open();
    let mut doc = flow_doc(0, "10.0.0.1", "10.0.0.2", 80, day(1));
    doc.fields.insert("orig_ip".into(), Value::Str("host".into()));
    assert!(matches!(
        store.index_batch(vec![doc]),
        Err(StoreError::SchemaConflict { .. })
    ));
}

#[test]
fn match_all_on_empty_store() {
    let (_d, store) = open();
    assert!(all(&store).is_empty());
    assert_eq!(store.count(&QueryFilter::match_all()).unwrap(), 0);
}

#[test]
fn term_query_matches_linear_scan() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..40)
        .map(|n| {
            let orig = if n % 6 == 0 { "10.0.0.9" } else { "10.0.0.1" };
            flow_doc(n, orig, "10.0.0.2", n as u16, day(1 + n % 2))
        })
        .collect();
    let expected: Vec<String> = docs
        .iter()
        .filter(|d| d.get("orig_ip") == Some(&Value::Ip(ip("10.0.0.9"))))
        .map(|d| d.doc_id.clone())
        .collect();
    assert_eq!(expected.len(), 7);
    store.index_batch(docs).unwrap();
    let got = store
        .query(&QueryFilter::match_all().term("orig_ip", "10.0.0.9"), 100, 0)
        .unwrap();
    let mut ids: Vec<_> = got.iter().map(|d| d.doc_id.clone()).collect();
    ids.sort();
    assert_eq!(ids, expected);
}

#[test]
fn query_orders_by_day_then_id_and_pages() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..10)
        .map(|n| flow_doc(n, "10.0.0.1", "10.0.0.2", 1, day(3 - n % 3)))
        .collect();
    store.index_batch(docs).unwrap();
    let every = all(&store);
    let keys: Vec<_> = every.iter().map(|d| (d.day, d.doc_id.clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let page = store.query(&QueryFilter::match_all(), 3, 4).unwrap();
    assert_eq!(page, every[4..7].to_vec());
}

#[test]
fn range_over_one_day_returns_that_partition() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..30)
        .map(|n| flow_doc(n, "10.0.0.1", "10.0.0.2", 1, day(1 + n % 3)))
        .collect();
    store.index_batch(docs).unwrap();
    let lo = "2018-03-02T00:00:00Z";
    let hi = "2018-03-02T23:59:59.999999Z";
    let got = store
        .query(
            &QueryFilter::match_all().range("first_ts", Some(lo), Some(hi)),
            usize::MAX,
            0,
        )
        .unwrap();
    let mut expected = Vec::new();
    store.for_each_doc(Some(Partition::Day(day(2))), |d| expected.push(d.clone()));
    assert_eq!(got.len(), 10);
    assert_eq!(got, expected);
}

#[test]
fn bad_literal_is_rejected() {
    let (_d, store) = open();
    let err = store
        .query(&QueryFilter::match_all().term("orig_ip", "not-an-ip"), 10, 0)
        .unwrap_err();
    assert!(matches!(err, StoreError::InvalidLiteral { .. }));
    let err = store
        .query(&QueryFilter::match_all().term("nope", "x"), 10, 0)
        .unwrap_err();
    assert!(matches!(err, StoreError::UnknownField(_)));
}

#[test]
fn terms_on_empty_store_is_empty() {
    let (_d, store) = open();
    let r = store
        .aggregate(&QueryFilter::match_all(), &pair_spec(), &StoreLimits::default())
        .unwrap();
    assert!(r.buckets.is_empty());
    assert_eq!(r.to_json(), serde_json::json!({"senders": {"buckets": []}}));
}

/// Sender → receiver → distinct ports by direct counting.
fn brute_pairs(docs: &[Document]) -> BTreeMap<IpAddr, BTreeMap<IpAddr, BTreeSet<i64>>> {
    let mut out: BTreeMap<IpAddr, BTreeMap<IpAddr, BTreeSet<i64>>> = BTreeMap::new();
    for d in docs {
        let (Some(Value::Ip(o)), Some(Value::Ip(r)), Some(Value::Int(p))) =
            (d.get("orig_ip"), d.get("resp_ip"), d.get("resp_port"))
        else {
            continue;
        };
        out.entry(*o).or_default().entry(*r).or_default().insert(*p);
    }
    out
}

#[test]
fn nested_terms_match_brute_force() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..12)
        .map(|n| {
            let orig = if n < 8 { "10.0.0.1" } else { "10.0.0.5" };
            let resp = ["10.0.1.1", "10.0.1.2", "10.0.1.3"][(n % 3) as usize];
            flow_doc(n, orig, resp, (n % 5) as u16, day(1))
        })
        .collect();
    let oracle = brute_pairs(&docs);
    store.index_batch(docs).unwrap();
    let r = store
        .aggregate(&QueryFilter::match_all(), &pair_spec(), &StoreLimits::default())
        .unwrap();
    assert_eq!(r.buckets.len(), 2);
    // doc_count order: 8 flows before 4
    assert_eq!(r.buckets[0].key, Value::Ip(ip("10.0.0.1")));
    for b in &r.buckets {
        let Value::Ip(o) = b.key else { panic!() };
        let got: BTreeMap<IpAddr, u64> = b.aggs["receivers"]
            .iter()
            .map(|c| match c.key {
                Value::Ip(r) => (r, c.metric("ports").unwrap()),
                _ => panic!(),
            })
            .collect();
        let want: BTreeMap<IpAddr, u64> = oracle[&o]
            .iter()
            .map(|(r, ports)| (*r, ports.len() as u64))
            .collect();
        assert_eq!(got, want);
    }
    assert_eq!(r.buckets_materialized, 2 + 3 + 3);
}

#[test]
fn bucket_limit_enforced_and_raisable() {
    let (_d, store) = open();
    let docs: Vec<_> = (0..10_001)
        .map(|n| {
            let a = n / 256;
            let b = n % 256;
            flow_doc(n, &format!("10.1.{a}.{b}"), "10.0.0.2", 1, day(1))
        })
        .collect();
    store.index_batch(docs).unwrap();
    let spec = AggregationSpec::new("s", TermsAgg::new("orig_ip"));
    let err = store
        .aggregate(&QueryFilter::match_all(), &spec, &StoreLimits::default())
        .unwrap_err();
    assert!(matches!(
        err,
        StoreError::TooManyBuckets {
            required: 10_001,
            limit: 10_000
        }
    ));
    let ok = store
        .aggregate(
            &QueryFilter::match_all(),
            &spec,
            &StoreLimits::with_max_buckets(20_000),
        )
        .unwrap();
    assert_eq!(ok.buckets.len(), 10_001);
}

#[test]
fn having_sort_and_size() {
    let (_d, store) = open();
    let mut docs = Vec::new();
    let mut n = 0;
    for (sender, ports) in [("10.0.0.1", 3), ("10.0.0.2", 7), ("10.0.0.3", 5), ("10.0.0.4", 5)] {
        for p in 0..ports {
            docs.push(flow_doc(n, sender, "10.0.9.9", p, day(1)));
            n += 1;
        }
    }
    store.index_batch(docs).unwrap();
    let spec = AggregationSpec::new(
        "s",
        TermsAgg::new("orig_ip")
            .metric(
                "u",
                Metric::UniqueCount {
                    field: "resp_port".into(),
                },
            )
            .having("u", 3)
            .sort_desc("u", Some(2)),
    );
    let r = store
        .aggregate(&QueryFilter::match_all(), &spec, &StoreLimits::default())
        .unwrap();
    let keys: Vec<String> = r.buckets.iter().map(|b| b.key.to_string()).collect();
    // 10.0.0.3 and 10.0.0.4 tie at 5; ascending key text breaks it
    assert_eq!(keys, ["10.0.0.2", "10.0.0.3"]);
    assert_eq!(r.buckets_materialized, 4);
}

#[test]
fn invalid_specs_rejected() {
    let (_d, store) = open();
    let limits = StoreLimits::default();
    let bad_sum = AggregationSpec::new(
        "s",
        TermsAgg::new("orig_ip").metric(
            "t",
            Metric::Sum {
                agg: "missing".into(),
                metric: "x".into(),
            },
        ),
    );
    assert!(matches!(
        store.aggregate(&QueryFilter::match_all(), &bad_sum, &limits),
        Err(StoreError::InvalidSpec(_))
    ));
    let unknown = AggregationSpec::new("s", TermsAgg::new("nope"));
    assert!(matches!(
        store.aggregate(&QueryFilter::match_all(), &unknown, &limits),
        Err(StoreError::UnknownField(_))
    ));
    let having = AggregationSpec::new("s", TermsAgg::new("orig_ip").having("ghost", 1));
    assert!(matches!(
        store.aggregate(&QueryFilter::match_all(), &having, &limits),
        Err(StoreError::InvalidSpec(_))
    ));
}

#[test]
fn list_fields_tracks_live_documents() {
    let (_d, store) = open();
    assert!(store.list_fields().is_empty());
    store
        .index_batch(vec![flow_doc(0, "10.0.0.1", "10.0.0.2", 80, day(1))])
        .unwrap();
    let schema = store.list_fields();
    assert_eq!(schema["orig_ip"].ty, FieldType::Ip);
    assert_eq!(schema["orig_ip"].docs, 1);
    let mut csv = Document {
        doc_id: "row1".into(),
        source_kind: SourceKind::Csv,
        day: None,
        fields: BTreeMap::new(),
    };
    csv.fields.insert("user".into(), Value::Str("alice".into()));
    csv.fields.insert("logins".into(), Value::Int(3));
    store.index_batch(vec![csv]).unwrap();
    let schema = store.list_fields();
    assert_eq!(schema["user"].ty, FieldType::String);
    assert_eq!(schema["logins"].ty, FieldType::Integer);
    store.cleanup(CleanupScope::All).unwrap();
    assert!(store.list_fields().is_empty());
}

#[test]
fn cleanup_by_day_and_all() {
    let (dir, store) = open();
    assert_eq!(store.cleanup(CleanupScope::All).unwrap(), 0);
    let docs: Vec<_> = (0..9)
        .map(|n| flow_doc(n, "10.0.0.1", "10.0.0.2", 1, day(1 + n % 3)))
        .collect();
    store.index_batch(docs).unwrap();
    assert_eq!(store.cleanup(CleanupScope::ByDay(day(2))).unwrap(), 3);
    assert_eq!(store.doc_count(), 6);
    assert!(!store.partition_counts().contains_key(&Partition::Day(day(2))));
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.doc_count(), 6);
    assert_eq!(store.cleanup(CleanupScope::All).unwrap(), 6);
    drop(store);
    assert_eq!(Store::open(dir.path()).unwrap().doc_count(), 0);
}

#[test]
fn reopen_replays_committed_batches() {
    let dir = tempfile::tempdir().unwrap();
    let docs: Vec<_> = (0..50)
        .map(|n| flow_doc(n, "10.0.0.1", "10.0.0.2", n as u16, day(1 + n % 2)))
        .collect();
    let before = {
        let store = Store::open(dir.path()).unwrap();
        store.index_batch(docs[..20].to_vec()).unwrap();
        store.index_batch(docs[20..].to_vec()).unwrap();
        (all(&store), store.list_fields())
    };
    let store = Store::open(dir.path()).unwrap();
    assert_eq!((all(&store), store.list_fields()), before);
}

#[test]
fn uncommitted_and_torn_lines_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path()).unwrap();
        store
            .index_batch(vec![flow_doc(1, "10.0.0.1", "10.0.0.2", 1, day(1))])
            .unwrap();
    }
    let part = dir.path().join("partitions/2018-03-01.jsonl");
    let stray = flow_doc(2, "10.0.0.1", "10.0.0.2", 2, day(1));
    let mut text = std::fs::read_to_string(&part).unwrap();
    text.push_str(&serde_json::json!({"batch": 7, "doc": stray}).to_string());
    text.push('\n');
    text.push_str("{\"batch\": 8, \"doc\": {\"doc_");
    std::fs::write(&part, text).unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.doc_count(), 1);
    // the next batch id skips past the abandoned one
    store
        .index_batch(vec![flow_doc(3, "10.0.0.1", "10.0.0.2", 3, day(1))])
        .unwrap();
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    let ids: Vec<_> = all(&store).into_iter().map(|d| d.doc_id).collect();
    assert_eq!(ids, ["f000001", "f000003"]);
}

#[test]
fn moved_document_stays_moved_after_cleanup() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path()).unwrap();
        let d = flow_doc(1, "10.0.0.1", "10.0.0.2", 1, day(1));
        store.index_batch(vec![d.clone()]).unwrap();
        let mut moved = d;
        moved.day = Some(day(2));
        store.index_batch(vec![moved]).unwrap();
        assert_eq!(store.doc_count(), 1);
        store.cleanup(CleanupScope::ByDay(day(2))).unwrap();
        assert_eq!(store.doc_count(), 0);
    }
    assert_eq!(Store::open(dir.path()).unwrap().doc_count(), 0);
}

#[test]
fn upsert_replaces_in_place() {
    let (_d, store) = open();
    let d = flow_doc(1, "10.0.0.1", "10.0.0.2", 1, day(1));
    store.index_batch(vec![d.clone(), d.clone()]).unwrap();
    let mut changed = d;
    changed.fields.insert("resp_port".into(), Value::Int(99));
    store.index_batch(vec![changed.clone()]).unwrap();
    assert_eq!(all(&store), vec![changed]);
    assert_eq!(store.list_fields()["resp_port"].docs, 1);
    let q = QueryFilter::match_all().term("resp_port", 1);
    assert_eq!(store.count(&q).unwrap(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_split_does_not_matter(
        flows in prop::collection::vec((0u8..6, 0u8..4, 0u16..20, 1u32..4), 1..60),
        cut in 0usize..60,
    ) {
        let docs: Vec<_> = flows
            .iter()
            .enumerate()
            .map(|(n, (o, r, p, d))| {
                flow_doc(n as u32, &format!("10.0.0.{o}"), &format!("10.0.1.{r}"), *p, day(*d))
            })
            .collect();
        let cut = cut.min(docs.len());
        let (_a, one) = open();
        one.index_batch(docs.clone()).unwrap();
        let (_b, two) = open();
        two.index_batch(docs[..cut].to_vec()).unwrap();
        two.index_batch(docs[cut..].to_vec()).unwrap();
        let limits = StoreLimits::default();
        let f = QueryFilter::match_all();
        prop_assert_eq!(all(&one), all(&two));
        prop_assert_eq!(
            one.aggregate(&f, &pair_spec(), &limits).unwrap(),
            two.aggregate(&f, &pair_spec(), &limits).unwrap()
        );
    }

    #[test]
    fn raising_having_never_adds_buckets(
        flows in prop::collection::vec((0u8..8, 0u16..30), 1..120),
        lo in 0u64..10,
        step in 0u64..10,
    ) {
        let docs: Vec<_> = flows
            .iter()
            .enumerate()
            .map(|(n, (o, p))| flow_doc(n as u32, &format!("10.0.0.{o}"), "10.0.1.1", *p, day(1)))
            .collect();
        let (_d, store) = open();
        store.index_batch(docs).unwrap();
        let keys = |gt: u64| -> BTreeSet<String> {
            let spec = AggregationSpec::new(
                "s",
                TermsAgg::new("orig_ip")
                    .metric("u", Metric::UniqueCount { field: "resp_port".into() })
                    .having("u", gt),
            );
            store
                .aggregate(&QueryFilter::match_all(), &spec, &StoreLimits::default())
                .unwrap()
                .buckets
                .iter()
                .map(|b| b.key.to_string())
                .collect()
        };
        prop_assert!(keys(lo + step).is_subset(&keys(lo)));
    }
}
