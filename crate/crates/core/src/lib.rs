//! Case-oriented network forensics: capture ingest, flow assembly, an
//! embedded flow store and port-scan analytics.

pub mod capture;
pub mod case;
pub mod decode;
pub mod detect;
pub mod error;
pub mod flow;
pub mod ingest;
pub mod store;
pub mod synth;
