//! Nested terms aggregations with exact unique counts, sums over child
//! buckets, `having` filters and descending bucket sort.
//!
//! Evaluation per terms node: group the node's documents by `field`
//! (documents without the field are skipped), evaluate child aggregations
//! inside each bucket, compute metrics, drop buckets failing any `having`,
//! order (by the sort metric, or by `doc_count`, descending; ties by the
//! key's text ascending), then keep the first `min(size, sort.size)`.
//! A sum metric adds up a metric over the child buckets that survive.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Document, FieldType, Result, StoreError, Value};

/// Built-in metric available on every bucket.
pub const DOC_COUNT: &str = "doc_count";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub name: String,
    pub terms: TermsAgg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermsAgg {
    pub field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, Metric>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub having: Vec<Having>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sort: Option<BucketSort>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aggs: BTreeMap<String, TermsAgg>,
}

impl TermsAgg {
    pub fn new(field: &str) -> Self {
        TermsAgg {
            field: field.to_string(),
            size: None,
            metrics: BTreeMap::new(),
            having: Vec::new(),
            sort: None,
            aggs: BTreeMap::new(),
        }
    }

    pub fn metric(mut self, name: &str, m: Metric) -> Self {
        self.metrics.insert(name.to_string(), m);
        self
    }

    pub fn having(mut self, metric: &str, gt: u64) -> Self {
        self.having.push(Having {
            metric: metric.to_string(),
            gt,
        });
        self
    }

    pub fn sort_desc(mut self, by: &str, size: Option<usize>) -> Self {
        self.sort = Some(BucketSort {
            by: by.to_string(),
            size,
        });
        self
    }

    pub fn size(mut self, size: usize) -> Self {
        self.size = Some(size);
        self
    }

    pub fn sub(mut self, name: &str, child: TermsAgg) -> Self {
        self.aggs.insert(name.to_string(), child);
        self
    }

    pub fn depth(&self) -> usize {
        1 + self.aggs.values().map(TermsAgg::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Exact number of distinct values of `field` in the bucket.
    UniqueCount { field: String },
    /// Sum of `metric` over the surviving buckets of child aggregation `agg`.
    Sum { agg: String, metric: String },
}

/// Keeps buckets whose `metric` is strictly greater than `gt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Having {
    pub metric: String,
    pub gt: u64,
}

/// Descending order by `by`, keeping the top `size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSort {
    pub by: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreLimits {
    pub max_buckets: u64,
}

impl Default for StoreLimits {
    fn default() -> Self {
        StoreLimits {
            max_buckets: 10_000,
        }
    }
}

impl StoreLimits {
    pub fn with_max_buckets(max_buckets: u64) -> Self {
        StoreLimits { max_buckets }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_buckets == 0 {
            return Err(StoreError::InvalidSpec("max_buckets must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub key: Value,
    pub doc_count: u64,
    pub metrics: BTreeMap<String, u64>,
    pub aggs: BTreeMap<String, Vec<Bucket>>,
}

impl Bucket {
    pub fn metric(&self, name: &str) -> Option<u64> {
        if name == DOC_COUNT {
            Some(self.doc_count)
        } else {
            self.metrics.get(name).copied()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("key".into(), self.key.to_plain_json());
        m.insert(DOC_COUNT.into(), self.doc_count.into());
        for (name, v) in &self.metrics {
            m.insert(name.clone(), json!({ "value": v }));
        }
        for (name, buckets) in &self.aggs {
            m.insert(name.clone(), buckets_json(buckets));
        }
        serde_json::Value::Object(m)
    }
}

fn buckets_json(buckets: &[Bucket]) -> serde_json::Value {
    json!({ "buckets": buckets.iter().map(Bucket::to_json).collect::<Vec<_>>() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationResult {
    pub name: String,
    pub buckets: Vec<Bucket>,
    /// Buckets created before `having`/sort/size trimming.
    pub buckets_materialized: u64,
}

impl AggregationResult {
    /// `{ "<name>": { "buckets": [ { "key", "doc_count", "<metric>": {"value"}, "<child>": {...} } ] } }`
    pub fn to_json(&self) -> serde_json::Value {
        json!({ self.name.clone(): buckets_json(&self.buckets) })
    }
}

impl Serialize for AggregationResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl AggregationSpec {
    pub fn new(name: &str, terms: TermsAgg) -> Self {
        AggregationSpec {
            name: name.to_string(),
            terms,
        }
    }

    pub(crate) fn validate(&self, types: &impl Fn(&str) -> Option<FieldType>) -> Result<()> {
        if self.name.is_empty() {
            return Err(StoreError::InvalidSpec("aggregation name is empty".into()));
        }
        validate_terms(&self.terms, types)
    }
}

fn reserved(name: &str) -> bool {
    name.is_empty() || name == "key" || name == DOC_COUNT
}

fn validate_terms(agg: &TermsAgg, types: &impl Fn(&str) -> Option<FieldType>) -> Result<()> {
    let invalid = |m: String| Err(StoreError::InvalidSpec(m));
    if types(&agg.field).is_none() {
        return Err(StoreError::UnknownField(agg.field.clone()));
    }
    for name in agg.aggs.keys() {
        if reserved(name) || agg.metrics.contains_key(name) {
            return invalid(format!("child aggregation name `{name}` is reserved or clashes"));
        }
    }
    let defined = |m: &str, a: &TermsAgg| m == DOC_COUNT || a.metrics.contains_key(m);
    for (name, metric) in &agg.metrics {
        if reserved(name) {
            return invalid(format!("metric name `{name}` is reserved"));
        }
        match metric {
            Metric::UniqueCount { field } => {
                if types(field).is_none() {
                    return Err(StoreError::UnknownField(field.clone()));
                }
            }
            Metric::Sum { agg: child, metric } => match agg.aggs.get(child) {
                None => return invalid(format!("sum `{name}` refers to unknown child `{child}`")),
                Some(c) if !defined(metric, c) => {
                    return invalid(format!("sum `{name}` refers to unknown metric `{metric}`"))
                }
                _ => {}
            },
        }
    }
    for h in &agg.having {
        if !defined(&h.metric, agg) {
            return invalid(format!("having refers to unknown metric `{}`", h.metric));
        }
    }
    if let Some(s) = &agg.sort {
        if !defined(&s.by, agg) {
            return invalid(format!("bucket sort refers to unknown metric `{}`", s.by));
        }
    }
    agg.aggs.values().try_for_each(|c| validate_terms(c, types))
}

fn group<'a>(field: &str, docs: &[&'a Document]) -> Vec<(&'a Value, Vec<&'a Document>)> {
    let mut groups: HashMap<&'a Value, Vec<&'a Document>> = HashMap::new();
    for d in docs {
        if let Some(v) = d.get(field) {
            groups.entry(v).or_default().push(*d);
        }
    }
    groups.into_iter().collect()
}

fn count_buckets(agg: &TermsAgg, docs: &[&Document]) -> u64 {
    let groups = group(&agg.field, docs);
    let mut n = groups.len() as u64;
    if !agg.aggs.is_empty() {
        for (_, members) in &groups {
            n += agg.aggs.values().map(|c| count_buckets(c, members)).sum::<u64>();
        }
    }
    n
}

fn build(agg: &TermsAgg, docs: &[&Document]) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = group(&agg.field, docs)
        .into_iter()
        .map(|(key, members)| {
            let aggs: BTreeMap<String, Vec<Bucket>> = agg
                .aggs
                .iter()
                .map(|(name, child)| (name.clone(), build(child, &members)))
                .collect();
            let metrics = agg
                .metrics
                .iter()
                .map(|(name, m)| {
                    let v = match m {
                        Metric::UniqueCount { field } => members
                            .iter()
                            .filter_map(|d| d.get(field))
                            .collect::<HashSet<_>>()
                            .len() as u64,
                        Metric::Sum { agg: child, metric } => aggs[child]
                            .iter()
                            .map(|b| b.metric(metric).unwrap_or(0))
                            .sum(),
                    };
                    (name.clone(), v)
                })
                .collect();
            Bucket {
                key: key.clone(),
                doc_count: members.len() as u64,
                metrics,
                aggs,
            }
        })
        .filter(|b| {
            agg.having
                .iter()
                .all(|h| b.metric(&h.metric).unwrap_or(0) > h.gt)
        })
        .collect();
    order_buckets(agg, &mut buckets);
    buckets
}

pub(crate) fn order_buckets(agg: &TermsAgg, buckets: &mut Vec<Bucket>) {
    let by = agg.sort.as_ref().map_or(DOC_COUNT, |s| s.by.as_str());
    // ties: ascending key text
    let mut keyed: Vec<(u64, String, Bucket)> = buckets
        .drain(..)
        .map(|b| (b.metric(by).unwrap_or(0), b.key.to_string(), b))
        .collect();
    keyed.sort_by(|x, y| y.0.cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
    let limit = [agg.size, agg.sort.as_ref().and_then(|s| s.size)]
        .into_iter()
        .flatten()
        .min();
    if let Some(limit) = limit {
        keyed.truncate(limit);
    }
    buckets.extend(keyed.into_iter().map(|(_, _, b)| b));
}

pub(crate) fn evaluate(
    spec: &AggregationSpec,
    docs: &[&Document],
    limits: &StoreLimits,
) -> Result<AggregationResult> {
    let required = count_buckets(&spec.terms, docs);
    if required > limits.max_buckets {
        return Err(StoreError::TooManyBuckets {
            required,
            limit: limits.max_buckets,
        });
    }
    Ok(AggregationResult {
        name: spec.name.clone(),
        buckets: build(&spec.terms, docs),
        buckets_materialized: required,
    })
}
