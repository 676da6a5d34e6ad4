//! Batch CLI and HTTP session service over `d4d-core`.

pub mod api;
pub mod cli;
pub mod error;
pub mod pipeline;

pub use error::Failure;
