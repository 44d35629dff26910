//! CSV and JSON-lines files to documents.
//!
//! Column types are inferred per file: integer when every non-empty value
//! parses as an integer, timestamp when every value is RFC 3339, otherwise
//! string. A column the store already knows is converted to the stored type
//! instead. Empty cells and JSON nulls are omitted from the document.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use sha2::{Digest, Sha256};

use super::IngestError;
use crate::flow::utc_day;
use crate::store::{Document, FieldType, SourceKind, Value};

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Text(String),
    Int(i64),
}

struct Table {
    /// Column names in first-seen order.
    columns: Vec<String>,
    rows: Vec<BTreeMap<String, Cell>>,
    /// Source line of each row.
    lines: Vec<usize>,
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<Table, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').trim().to_string())
        .collect();
    if let Some(i) = columns.iter().position(String::is_empty) {
        return Err(parse_err(path, 1, format!("column {} has an empty name", i + 1)));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(parse_err(path, 1, format!("duplicate column `{dup}`")));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        let row = columns
            .iter()
            .zip(rec.iter())
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, v)| (c.clone(), Cell::Text(v.to_string())))
            .collect();
        rows.push(row);
        lines.push(rec.position().map_or(i + 2, |p| p.line() as usize));
    }
    Ok(Table {
        columns,
        rows,
        lines,
    })
}

fn flatten(prefix: &str, v: &serde_json::Value, row: &mut BTreeMap<String, Cell>, columns: &mut Vec<String>) {
    use serde_json::Value as J;
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    let mut put = |name: String, cell: Cell| {
        if !columns.contains(&name) {
            columns.push(name.clone());
        }
        row.insert(name, cell);
    };
    match v {
        J::Object(map) => {
            for (k, child) in map {
                flatten(&key(k), child, row, columns);
            }
        }
        J::Null => {}
        J::String(s) => put(prefix.to_string(), Cell::Text(s.clone())),
        J::Number(n) => match n.as_i64() {
            Some(i) => put(prefix.to_string(), Cell::Int(i)),
            None => put(prefix.to_string(), Cell::Text(n.to_string())),
        },
        J::Bool(b) => put(prefix.to_string(), Cell::Text(b.to_string())),
        J::Array(_) => put(prefix.to_string(), Cell::Text(v.to_string())),
    }
}

fn read_json_lines(path: &Path, bytes: &[u8]) -> Result<Table, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_start_matches('\u{feff}').trim();
        if line.is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if !v.is_object() {
            return Err(parse_err(path, i + 1, "expected a JSON object"));
        }
        let mut row = BTreeMap::new();
        flatten("", &v, &mut row, &mut columns);
        rows.push(row);
        lines.push(i + 1);
    }
    Ok(Table {
        columns,
        rows,
        lines,
    })
}

fn parse_ts(s: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|d| d.with_timezone(&Utc).timestamp_micros())
}

fn infer(table: &Table, column: &str) -> FieldType {
    let cells = || table.rows.iter().filter_map(|r| r.get(column));
    let all_int = cells().all(|c| match c {
        Cell::Int(_) => true,
        Cell::Text(s) => s.trim().parse::<i64>().is_ok(),
    });
    if all_int {
        return FieldType::Integer;
    }
    let all_ts = cells().all(|c| matches!(c, Cell::Text(s) if parse_ts(s).is_some()));
    if all_ts {
        FieldType::Timestamp
    } else {
        FieldType::String
    }
}

fn convert(cell: &Cell, ty: FieldType) -> Option<Value> {
    match (ty, cell) {
        (FieldType::Integer, Cell::Int(i)) => Some(Value::Int(*i)),
        (FieldType::Integer, Cell::Text(s)) => s.trim().parse().ok().map(Value::Int),
        (FieldType::Timestamp, Cell::Int(i)) => Some(Value::Ts(*i)),
        (FieldType::Timestamp, Cell::Text(s)) => parse_ts(s).map(Value::Ts),
        (FieldType::Ip, Cell::Text(s)) => s.trim().parse().ok().map(Value::Ip),
        (FieldType::Ip, Cell::Int(_)) => None,
        (FieldType::String, Cell::Int(i)) => Some(Value::Str(i.to_string())),
        (FieldType::String, Cell::Text(s)) => Some(Value::Str(s.clone())),
    }
}

/// Parses one CSV or JSON-lines file into documents. `known` gives the
/// store's type for already indexed fields. Document ids derive from the
/// file content and row number, so re-importing a file replaces its rows.
pub fn parse_file(
    path: &Path,
    kind: SourceKind,
    known: &dyn Fn(&str) -> Option<FieldType>,
    day_override: Option<NaiveDate>,
) -> Result<Vec<Document>, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    let table = match kind {
        SourceKind::Csv => read_csv(path, &bytes)?,
        SourceKind::Json => read_json_lines(path, &bytes)?,
        SourceKind::Flow => unreachable!("flows come from captures"),
    };
    let types: Vec<(String, FieldType)> = table
        .columns
        .iter()
        .map(|c| (c.clone(), known(c).unwrap_or_else(|| infer(&table, c))))
        .collect();
    let digest = Sha256::digest(&bytes);
    let file_id: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    let mut docs = Vec::with_capacity(table.rows.len());
    for (n, row) in table.rows.iter().enumerate() {
        let mut fields = BTreeMap::new();
        let mut first_ts = None;
        for (col, ty) in &types {
            let Some(cell) = row.get(col) else { continue };
            let value = convert(cell, *ty).ok_or_else(|| {
                parse_err(
                    path,
                    table.lines[n],
                    format!("value {cell:?} of column `{col}` is not a valid {ty}"),
                )
            })?;
            if let (None, Value::Ts(t)) = (first_ts, &value) {
                first_ts = Some(*t);
            }
            fields.insert(col.clone(), value);
        }
        if fields.is_empty() {
            continue;
        }
        docs.push(Document {
            doc_id: format!("{file_id}-{n}"),
            source_kind: kind,
            day: day_override.or(first_ts.map(utc_day)),
            fields,
        });
    }
    Ok(docs)
}
