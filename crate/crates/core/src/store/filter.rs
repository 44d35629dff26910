use std::net::IpAddr;
use std::sync::Arc;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use super::{Document, FieldType, PartitionIndex, Result, StoreError, Value};

/// Conjunction of predicates. An empty filter matches every document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    #[serde(default)]
    pub must: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Term {
        field: String,
        value: Literal,
    },
    /// Inclusive on both ends; a missing bound is open.
    Range {
        field: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gte: Option<Literal>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lte: Option<Literal>,
    },
    Exists {
        field: String,
    },
}

/// A query-side value, converted to the field's indexed type on use.
/// Timestamps accept microseconds or RFC 3339 text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Int(i64),
    Text(String),
}

impl From<i64> for Literal {
    fn from(i: i64) -> Self {
        Literal::Int(i)
    }
}

impl From<&str> for Literal {
    fn from(s: &str) -> Self {
        Literal::Text(s.to_string())
    }
}

impl From<String> for Literal {
    fn from(s: String) -> Self {
        Literal::Text(s)
    }
}

impl From<IpAddr> for Literal {
    fn from(ip: IpAddr) -> Self {
        Literal::Text(ip.to_string())
    }
}

impl Literal {
    pub fn resolve(&self, field: &str, ty: FieldType) -> Result<Value> {
        let bad = |reason: String| StoreError::InvalidLiteral {
            field: field.to_string(),
            reason,
        };
        match (ty, self) {
            (FieldType::String, Literal::Text(s)) => Ok(Value::Str(s.clone())),
            (FieldType::String, Literal::Int(i)) => Ok(Value::Str(i.to_string())),
            (FieldType::Integer, Literal::Int(i)) => Ok(Value::Int(*i)),
            (FieldType::Integer, Literal::Text(s)) => s
                .trim()
                .parse()
                .map(Value::Int)
                .map_err(|_| bad(format!("`{s}` is not an integer"))),
            (FieldType::Timestamp, Literal::Int(i)) => Ok(Value::Ts(*i)),
            (FieldType::Timestamp, Literal::Text(s)) => DateTime::parse_from_rfc3339(s)
                .map(|d| Value::Ts(d.timestamp_micros()))
                .or_else(|_| s.trim().parse().map(Value::Ts))
                .map_err(|_| bad(format!("`{s}` is not a timestamp"))),
            (FieldType::Ip, Literal::Text(s)) => s
                .trim()
                .parse()
                .map(Value::Ip)
                .map_err(|_| bad(format!("`{s}` is not an ip address"))),
            (FieldType::Ip, Literal::Int(i)) => Err(bad(format!("`{i}` is not an ip address"))),
        }
    }
}

impl QueryFilter {
    pub fn match_all() -> Self {
        QueryFilter::default()
    }

    pub fn term(mut self, field: &str, value: impl Into<Literal>) -> Self {
        self.must.push(Predicate::Term {
            field: field.to_string(),
            value: value.into(),
        });
        self
    }

    pub fn range(
        mut self,
        field: &str,
        gte: Option<impl Into<Literal>>,
        lte: Option<impl Into<Literal>>,
    ) -> Self {
        self.must.push(Predicate::Range {
            field: field.to_string(),
            gte: gte.map(Into::into),
            lte: lte.map(Into::into),
        });
        self
    }

    pub fn exists(mut self, field: &str) -> Self {
        self.must.push(Predicate::Exists {
            field: field.to_string(),
        });
        self
    }

    pub(crate) fn resolve(
        &self,
        types: impl Fn(&str) -> Option<FieldType>,
    ) -> Result<Vec<Resolved>> {
        let ty = |f: &str| types(f).ok_or_else(|| StoreError::UnknownField(f.to_string()));
        self.must
            .iter()
            .map(|p| {
                Ok(match p {
                    Predicate::Term { field, value } => Resolved::Term {
                        field: field.clone(),
                        value: value.resolve(field, ty(field)?)?,
                    },
                    Predicate::Range { field, gte, lte } => {
                        let t = ty(field)?;
                        Resolved::Range {
                            field: field.clone(),
                            lo: gte.as_ref().map(|l| l.resolve(field, t)).transpose()?,
                            hi: lte.as_ref().map(|l| l.resolve(field, t)).transpose()?,
                        }
                    }
                    Predicate::Exists { field } => {
                        ty(field)?;
                        Resolved::Exists {
                            field: field.clone(),
                        }
                    }
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Resolved {
    Term {
        field: String,
        value: Value,
    },
    Range {
        field: String,
        lo: Option<Value>,
        hi: Option<Value>,
    },
    Exists {
        field: String,
    },
}

impl Resolved {
    pub(crate) fn matches(&self, doc: &Document) -> bool {
        match self {
            Resolved::Term { field, value } => doc.get(field) == Some(value),
            Resolved::Range { field, lo, hi } => doc.get(field).is_some_and(|v| {
                lo.as_ref().is_none_or(|lo| v >= lo) && hi.as_ref().is_none_or(|hi| v <= hi)
            }),
            Resolved::Exists { field } => doc.fields.contains_key(field),
        }
    }
}

/// Live documents of one partition satisfying every predicate, in doc_id order.
pub(crate) fn matching<'a>(
    index: &'a PartitionIndex,
    preds: &'a [Resolved],
) -> Box<dyn Iterator<Item = &'a Arc<Document>> + 'a> {
    let shortest = preds
        .iter()
        .filter_map(|p| match p {
            Resolved::Term { field, value } => Some(
                index
                    .postings
                    .get(field)
                    .and_then(|m| m.get(value))
                    .map_or(&[][..], |v| v.as_slice()),
            ),
            _ => None,
        })
        .min_by_key(|p| p.len());
    match shortest {
        Some(postings) => {
            let mut docs: Vec<&Arc<Document>> = postings
                .iter()
                .filter_map(|&o| index.doc(o))
                .filter(|d| preds.iter().all(|p| p.matches(d)))
                .collect();
            docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
            docs.dedup_by(|a, b| a.doc_id == b.doc_id);
            Box::new(docs.into_iter())
        }
        None => Box::new(
            index
                .by_id
                .values()
                .filter_map(|&o| index.doc(o))
                .filter(move |d| preds.iter().all(|p| p.matches(d))),
        ),
    }
}
