//! HTTP service and command-line front end for netcase cases.

pub mod api;
pub mod cli;
pub mod error;
pub mod ops;

pub use error::{ApiError, ServiceError};
