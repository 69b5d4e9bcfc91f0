//! Dataset version control with record-level deduplication.
//!
//! A *collaborative versioned dataset* (CVD) keeps every committed version of
//! a table while storing each distinct record exactly once per storage
//! partition. The crate provides:
//!
//! - the version graph and its bipartite version/record statistics ([`graph`]),
//! - checkout/commit/diff over an on-disk, crash-safe store ([`engine`], [`store`]),
//! - a latency-bounded partitioner with provable storage and checkout-cost
//!   guarantees, plus exhaustive and heuristic baselines ([`partition`],
//!   [`baselines`]),
//! - online partition maintenance and batch migration ([`maintain`]),
//! - synthetic workload generation and benchmarking ([`bench`]).

pub mod baselines;
pub mod bench;
pub mod engine;
pub mod error;
pub mod graph;
pub mod maintain;
pub mod partition;
pub mod store;
pub mod value;

pub use error::{Error, Result};
pub use graph::{BipartiteStats, RecordId, VersionGraph, VersionId, VersionMeta};
pub use partition::{CostReport, PartitioningScheme};
pub use value::{Attribute, DataType, Value};
