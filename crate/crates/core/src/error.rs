//! Shared error type for the whole crate.

use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An index or size is outside its valid range.
    #[error("out of range: {0}")]
    Range(String),
    /// A configuration value is missing, unknown, or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// A file did not parse; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// Expert bank and dataset do not belong together.
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    /// Normalized match loss with a zero-length expert segment.
    #[error("degenerate expert segment: start and target snapshots coincide")]
    DegenerateSegment,
    /// A test oracle was asked to materialize something too large.
    #[error("oracle cap exceeded: {size} entries > cap {cap}")]
    OracleCap { size: usize, cap: usize },
    /// Trajectory sampling could not satisfy the requested span.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// Input data is malformed (labels out of range, empty sets, ...).
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
