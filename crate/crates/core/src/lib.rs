//! Distributed stratified locality sensitive hashing (SLSH).
//!
//! The engine answers approximate K-NN queries over fixed-length feature
//! vectors (mean arterial pressure per lag subwindow) and turns the
//! neighbor labels into a binary prediction. It is laid out as:
//!
//! - [`lsh`]: seed-deterministic hash families (l1 bit sampling, cosine
//!   random projection) and their m-fold composition.
//! - [`slsh`]: the two-layer index, candidate generation and the counted
//!   linear scan, plus the top-K reduction used at every merge point.
//! - [`node`]: one index node splitting its outer tables over `p` workers.
//! - [`orchestrator`]: root / forwarder / reducer pipeline over `ν` nodes.
//! - [`protocol`]: newline-delimited JSON frames exchanged between them.
//! - [`pipeline`]: per-beat MAP series to labeled lag-window datasets.
//! - [`eval`]: exhaustive baseline, MCC, recall and benchmark harness.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod lsh;
pub mod node;
pub mod orchestrator;
pub mod pipeline;
pub mod protocol;
pub mod slsh;
pub mod snapshot;

pub use dataset::{Dataset, LabeledPoint, PointStore, Source};
pub use error::{Error, Result};
pub use lsh::{BucketKey, ComposedHash, HashFamily, HashSpec};
pub use slsh::{KnnEntry, QueryStats, SlshConfig, SlshIndex};
