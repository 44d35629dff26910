//! Machine-readable error codes shared by the CLI and the HTTP API.
//!
//! Each error variant maps to one code named after it. Wrapping variants
//! (`Ingest(..)`, `InFile{..}`) report the code of what they wrap.

use serde::Serialize;
use serde_json::json;

use crate::capture::CaptureError;
use crate::case::CaseError;
use crate::flow::FlowError;
use crate::ingest::IngestError;
use crate::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Usage,
    NotFound,
    Conflict,
    Busy,
    InvalidInput,
    Limit,
    Storage,
    Internal,
}

impl ErrorClass {
    /// Process exit status. 0 is success and 2 is a usage error.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::NotFound => 3,
            ErrorClass::Conflict => 4,
            ErrorClass::Busy => 5,
            ErrorClass::InvalidInput => 6,
            ErrorClass::Limit => 7,
            ErrorClass::Storage => 8,
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorClass::Usage | ErrorClass::InvalidInput => 400,
            ErrorClass::NotFound => 404,
            ErrorClass::Conflict | ErrorClass::Busy => 409,
            ErrorClass::Limit => 422,
            ErrorClass::Storage => 507,
            ErrorClass::Internal => 500,
        }
    }
}

pub trait Coded: std::error::Error {
    fn code(&self) -> &'static str;
    fn class(&self) -> ErrorClass;
    /// Structured fields worth returning with the message.
    fn detail(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

impl Coded for CaptureError {
    fn code(&self) -> &'static str {
        match self {
            CaptureError::UnknownMagic(_) => "UnknownMagic",
            CaptureError::UnsupportedVersion(..) => "UnsupportedVersion",
            CaptureError::InvalidHeader(_) => "InvalidHeader",
            CaptureError::TruncatedRecord { .. } => "TruncatedRecord",
            CaptureError::InvalidRecord { .. } => "InvalidRecord",
            CaptureError::Unrepairable(_) => "Unrepairable",
            CaptureError::InFile { .. } => self.root().code(),
            CaptureError::Io(_) => "Io",
        }
    }

    fn class(&self) -> ErrorClass {
        match self.root() {
            CaptureError::Io(_) => ErrorClass::Internal,
            _ => ErrorClass::InvalidInput,
        }
    }

    fn detail(&self) -> serde_json::Value {
        let offset = match self.root() {
            CaptureError::TruncatedRecord { offset } | CaptureError::InvalidRecord { offset, .. } => {
                Some(*offset)
            }
            _ => None,
        };
        let path = match self {
            CaptureError::InFile { path, .. } => Some(path.display().to_string()),
            _ => None,
        };
        match (path, offset) {
            (None, None) => serde_json::Value::Null,
            (path, offset) => json!({ "path": path, "offset": offset }),
        }
    }
}

impl Coded for FlowError {
    fn code(&self) -> &'static str {
        match self {
            FlowError::OutOfOrderInput { .. } => "OutOfOrderInput",
            FlowError::InvalidConfig(_) => "InvalidConfig",
            FlowError::NameTable { .. } => "NameTable",
        }
    }

    fn class(&self) -> ErrorClass {
        ErrorClass::InvalidInput
    }

    fn detail(&self) -> serde_json::Value {
        match self {
            FlowError::OutOfOrderInput { ts, watermark } => json!({ "ts": ts, "watermark": watermark }),
            FlowError::NameTable { line, .. } => json!({ "line": line }),
            FlowError::InvalidConfig(_) => serde_json::Value::Null,
        }
    }
}

impl Coded for StoreError {
    fn code(&self) -> &'static str {
        match self {
            StoreError::SchemaConflict { .. } => "SchemaConflict",
            StoreError::StorageFull => "StorageFull",
            StoreError::UnknownField(_) => "UnknownField",
            StoreError::InvalidLiteral { .. } => "InvalidLiteral",
            StoreError::InvalidDocument(_) => "InvalidDocument",
            StoreError::InvalidSpec(_) => "InvalidSpec",
            StoreError::TooManyBuckets { .. } => "TooManyBuckets",
            StoreError::Corrupt(_) => "Corrupt",
            StoreError::Io(_) => "Io",
        }
    }

    fn class(&self) -> ErrorClass {
        match self {
            StoreError::SchemaConflict { .. } => ErrorClass::Conflict,
            StoreError::StorageFull => ErrorClass::Storage,
            StoreError::UnknownField(_)
            | StoreError::InvalidLiteral { .. }
            | StoreError::InvalidDocument(_)
            | StoreError::InvalidSpec(_) => ErrorClass::InvalidInput,
            StoreError::TooManyBuckets { .. } => ErrorClass::Limit,
            StoreError::Corrupt(_) | StoreError::Io(_) => ErrorClass::Internal,
        }
    }

    fn detail(&self) -> serde_json::Value {
        match self {
            StoreError::TooManyBuckets { required, limit } => {
                json!({ "required": required, "limit": limit })
            }
            StoreError::UnknownField(f) => json!({ "field": f }),
            StoreError::InvalidLiteral { field, .. } => json!({ "field": field }),
            _ => serde_json::Value::Null,
        }
    }
}

impl Coded for IngestError {
    fn code(&self) -> &'static str {
        match self {
            IngestError::UnknownFormat(_) => "UnknownFormat",
            IngestError::CorruptArchive(_) => "CorruptArchive",
            IngestError::UnsafePath(_) => "UnsafePath",
            IngestError::ArchiveTooDeep(_) => "ArchiveTooDeep",
            IngestError::PathOutsideCase(_) => "PathOutsideCase",
            IngestError::NotFound(_) => "NotFound",
            IngestError::InvalidConfig(_) => "InvalidConfig",
            IngestError::Parse { .. } => "Parse",
            IngestError::Capture(e) => e.code(),
            IngestError::Flow(e) => e.code(),
            IngestError::Store(e) => e.code(),
            IngestError::Io { .. } => "Io",
        }
    }

    fn class(&self) -> ErrorClass {
        match self {
            IngestError::NotFound(_) => ErrorClass::NotFound,
            IngestError::Capture(e) => e.class(),
            IngestError::Flow(e) => e.class(),
            IngestError::Store(e) => e.class(),
            IngestError::Io { .. } => ErrorClass::Internal,
            _ => ErrorClass::InvalidInput,
        }
    }

    fn detail(&self) -> serde_json::Value {
        match self {
            IngestError::Parse { path, line, .. } => {
                json!({ "path": path.display().to_string(), "line": line })
            }
            IngestError::Capture(e) => e.detail(),
            IngestError::Flow(e) => e.detail(),
            IngestError::Store(e) => e.detail(),
            _ => serde_json::Value::Null,
        }
    }
}

impl Coded for CaseError {
    fn code(&self) -> &'static str {
        match self {
            CaseError::InvalidId(_) => "InvalidId",
            CaseError::DuplicateId(_) => "DuplicateId",
            CaseError::NotFound(_) => "NotFound",
            CaseError::CaseBusy(_) => "CaseBusy",
            CaseError::CaseStopped(_) => "CaseStopped",
            CaseError::CorruptArchive(_) => "CorruptArchive",
            CaseError::UnknownConfig(_) => "UnknownConfig",
            CaseError::UnknownWatch(_) => "UnknownWatch",
            CaseError::CorruptManifest { .. } => "CorruptManifest",
            CaseError::Store(e) => e.code(),
            CaseError::Ingest(e) => e.code(),
            CaseError::Io { .. } => "Io",
        }
    }

    fn class(&self) -> ErrorClass {
        match self {
            CaseError::InvalidId(_) | CaseError::CorruptArchive(_) => ErrorClass::InvalidInput,
            CaseError::DuplicateId(_) => ErrorClass::Conflict,
            CaseError::NotFound(_) | CaseError::UnknownConfig(_) | CaseError::UnknownWatch(_) => {
                ErrorClass::NotFound
            }
            CaseError::CaseBusy(_) | CaseError::CaseStopped(_) => ErrorClass::Busy,
            CaseError::CorruptManifest { .. } | CaseError::Io { .. } => ErrorClass::Internal,
            CaseError::Store(e) => e.class(),
            CaseError::Ingest(e) => e.class(),
        }
    }

    fn detail(&self) -> serde_json::Value {
        match self {
            CaseError::Store(e) => e.detail(),
            CaseError::Ingest(e) => e.detail(),
            _ => serde_json::Value::Null,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrappers_report_the_inner_code() {
        let inner = StoreError::TooManyBuckets {
            required: 11,
            limit: 10,
        };
        let e = CaseError::Ingest(IngestError::Store(inner));
        assert_eq!(e.code(), "TooManyBuckets");
        assert_eq!(e.class(), ErrorClass::Limit);
        assert_eq!(e.detail(), json!({"required": 11, "limit": 10}));
        let cap = CaptureError::TruncatedRecord { offset: 40 }.in_file(std::path::Path::new("x.pcap"));
        assert_eq!(cap.code(), "TruncatedRecord");
        assert_eq!(cap.detail(), json!({"path": "x.pcap", "offset": 40}));
    }

    #[test]
    fn classes_have_distinct_exit_codes() {
        use ErrorClass::*;
        let all = [Usage, NotFound, Conflict, Busy, InvalidInput, Limit, Storage, Internal];
        let codes: std::collections::BTreeSet<i32> = all.iter().map(|c| c.exit_code()).collect();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0));
        assert_eq!(Usage.exit_code(), 2);
        assert_eq!(NotFound.http_status(), 404);
    }
}
